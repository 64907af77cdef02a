//! Trainable layers built on the tape, plus SGD.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{invalid_arg, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform `(-bound, bound)` initialisation with `bound = 1/sqrt(fan_in)`.
pub fn fan_in_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: params.add(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, self.eps)?;
                let m = T::of(self.momentum);
                let unbias = T::of(stats.count as f64 / (stats.count - 1) as f64);
                for c in 0..self.running_mean.len() {
                    self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * stats.mean[c];
                    self.running_var[c] = (T::one() - m) * self.running_var[c] + m * stats.var[c] * unbias;
                }
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(x, g, b, &self.running_mean, &self.running_var, self.eps),
        }
    }
}

/// 1x1 convolution layer.
#[derive(Clone, Debug)]
pub struct PointwiseConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl PointwiseConv {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), fan_in_uniform(rng, &[c_out, c_in], c_in));
        let bias = bias.then(|| params.add(format!("{name}.bias"), fan_in_uniform(rng, &[c_out], c_in)));
        Self { weight, bias, c_in, c_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = self.bias.map(|b| tape.param(params, b));
        tape.pointwise_conv(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl DepthwiseConv {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(invalid_arg!("depthwise kernel must be odd, got {kernel}"));
        }
        let weight =
            params.add(format!("{name}.weight"), fan_in_uniform(rng, &[channels, kernel, kernel], kernel * kernel));
        Ok(Self { weight, kernel, stride })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        tape.depthwise_conv(x, w, self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[c_out, c_in, kernel, kernel], c_in * kernel * kernel),
        );
        Self { weight, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        tape.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, f_in: usize, f_out: usize) -> Self {
        Self {
            weight: params.add(format!("{name}.weight"), fan_in_uniform(rng, &[f_out, f_in], f_in)),
            bias: params.add(format!("{name}.bias"), fan_in_uniform(rng, &[f_out], f_in)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// SGD with classical momentum: `v <- mu v + g; p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        }
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            for ((w, &g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(vel.iter_mut()) {
                *v = mu * *v + g;
                *w = *w - lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut params = ParamSet::<f64>::new();
        let id = params.add("x", Tensor::from_f64([2], &[3.0, -2.0]).unwrap());
        let mut opt = Sgd::new(0.1, 0.9);
        for _ in 0..200 {
            params.zero_grad();
            let mut tape = Tape::new();
            let x = tape.param(&params, id);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss, &mut params).unwrap();
            opt.step(&mut params);
        }
        assert!(params.value(id).max_abs() < 1e-3);
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::<f64>::new();
        let mut bn = BatchNorm::new(&mut params, "bn", 2);
        let x = fan_in_uniform::<f64>(&mut rng, &[4, 2, 3, 3], 1).map(|v| v * 5.0 + 2.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        bn.forward(&mut tape, &params, xv, Mode::Eval).unwrap();
        assert_eq!(bn.running_mean, vec![0.0, 0.0]);
        bn.forward(&mut tape, &params, xv, Mode::Train).unwrap();
        assert!(bn.running_mean.iter().all(|&m| m > 0.0));
    }
}
