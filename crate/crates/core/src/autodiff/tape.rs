use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid_arg, Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::ops::Op;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    pub(crate) idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Owner of every learnable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros_like(&value);
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when no path
    /// from `v` reaches the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }
}

/// Record of one forward pass.
pub struct Tape<T> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    check_finite: bool,
    consumed: bool,
    inference: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            consumed: false,
            inference: false,
        }
    }

    /// Turn the non-finite output check on or off (on by default in debug builds).
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Marks the tape as an inference recording; `backward` will refuse it.
    pub fn mark_inference(&mut self) {
        self.inference = true;
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant. Gradients are still computed for it, which lets
    /// callers inspect the gradient arriving at an input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf)
    }

    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        self.push_unchecked(params.value(id).clone(), Op::Param(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.idx].value
    }

    pub(crate) fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::InvalidState("variable is not recorded on this tape".into()));
        }
        Ok(v.idx)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::InvalidState("tape already consumed by backward".into()));
        }
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push_unchecked(value, op))
    }

    /// Reverse-mode sweep from a scalar `loss`. Parameter gradients are
    /// added into `params`; the tape cannot record or run backward again.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<T>) -> Result<Gradients<T>> {
        let root = self.idx(loss)?;
        if self.consumed {
            return Err(Error::InvalidState("backward already ran on this tape".into()));
        }
        if self.inference {
            return Err(Error::InvalidState("tape was recorded in inference mode".into()));
        }
        if self.nodes[root].value.len() != 1 {
            return Err(invalid_arg!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape().to_vec(), T::one()));

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                let dst = &mut params.get_mut(id).grad;
                for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d = *d + *s;
                }
            }
            for (parent, contrib) in node.op.backward(&self.nodes, &node.value, &g) {
                debug_assert!(parent < i, "tape order violated");
                accumulate(&mut grads[parent], contrib, &self.nodes[parent].value);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Vec<T>, like: &Tensor<T>) {
    debug_assert_eq!(contrib.len(), like.len());
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        None => {
            *slot = Some(Tensor::new(like.shape().to_vec(), contrib).expect("gradient shape"));
        }
    }
}
