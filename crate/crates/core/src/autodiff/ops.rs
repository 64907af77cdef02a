use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::pairing::PairMap;
use crate::tensor::{pairwise_sum, Scalar, Tensor};

use super::tape::{Node, ParamId, Tape, Var};

thread_local! {
    static DYNORM_SIGN_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Mutation fixture: runs `f` with the sign of the DyNorm input gradient
/// flipped on the current thread. Gradient checks must catch it.
#[doc(hidden)]
pub fn with_dynorm_sign_fault<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            DYNORM_SIGN_FAULT.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(DYNORM_SIGN_FAULT.with(|c| c.replace(true)));
    f()
}

/// Bounded sigmoidal curve applied by [`Tape::dynorm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    /// `u / (1 + |u|)`
    Softsign,
    /// `e^u / (e^u + 1)`
    Sigmoid,
    /// `u / sqrt(1 + u^2)`
    Algebraic,
}

impl CurveKind {
    pub fn eval<T: Scalar>(self, u: T) -> T {
        let one = T::one();
        match self {
            CurveKind::Softsign => u / (one + u.abs()),
            CurveKind::Sigmoid => {
                if u >= T::zero() {
                    one / (one + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (one + e)
                }
            }
            CurveKind::Algebraic => u / (one + u * u).sqrt(),
        }
    }

    pub fn derivative<T: Scalar>(self, u: T) -> T {
        let one = T::one();
        match self {
            CurveKind::Softsign => {
                let d = one + u.abs();
                one / (d * d)
            }
            CurveKind::Sigmoid => {
                let s = self.eval(u);
                s * (one - s)
            }
            CurveKind::Algebraic => {
                let d = one + u * u;
                one / (d * d.sqrt())
            }
        }
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of elements each channel statistic was computed over.
    pub count: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Abs(usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    HardSwish(usize),
    PointwiseConv { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    DepthwiseConv { x: usize, w: usize, stride: usize },
    GlobalAvgPool(usize),
    ChannelConv1d { v: usize, w: usize, b: Option<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Linear { x: usize, w: usize, b: Option<usize> },
    Softmax(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    StraightThrough(usize),
    GatherChannels { x: usize, mask: usize, indices: Vec<Vec<usize>> },
    CrossHadamard(usize),
    DyNorm { x: usize, alpha: usize, w: usize, b: usize, curve: CurveKind },
    ConcatChannels(usize, usize),
}

/// `(outer, channels, inner)` factorisation of a tensor around axis 1.
fn channel_split(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [] => (1, 1, 1),
        [c] => (1, *c, 1),
        [n, c, rest @ ..] => (*n, *c, rest.iter().product()),
    }
}

impl<T: Scalar> Tape<T> {
    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y)?;
        self.push("add", v, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(ia, ib))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(ia, ib))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(|x| x.abs());
        self.push("abs", v, Op::Abs(ia))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(|x| x * s);
        self.push("scale", v, Op::Scale(ia, s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.sum());
        self.push("sum", v, Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(invalid_arg!("mean of empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.push("mean", v, Op::Mean(ia))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(|x| x.max(T::zero()));
        self.push("relu", v, Op::Relu(ia))
    }

    /// `x * relu6(x + 3) / 6`
    pub fn hardswish(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(hardswish);
        self.push("hardswish", v, Op::HardSwish(ia))
    }

    // ---- convolutions and pooling ------------------------------------

    /// 1x1 convolution: `out[n,o] = sum_c w[o,c] x[n,c] + b[o]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let xt = &self.nodes[ix].value;
        let (n, c, h, wd) = xt.dims4()?;
        let (co, ci) = self.nodes[iw].value.dims2()?;
        if ci != c {
            return Err(invalid_arg!("pointwise conv expects {ci} input channels, got {c}"));
        }
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [co] {
                return Err(invalid_arg!("pointwise bias must have shape [{co}]"));
            }
        }
        let hw = h * wd;
        let wt = self.nodes[iw].value.data();
        let xd = xt.data();
        let mut out = vec![T::zero(); n * co * hw];
        for s in 0..n {
            for o in 0..co {
                let dst = &mut out[(s * co + o) * hw..(s * co + o + 1) * hw];
                if let Some(ib) = ib {
                    let bv = self.nodes[ib].value.data()[o];
                    dst.iter_mut().for_each(|d| *d = bv);
                }
                for k in 0..c {
                    let wv = wt[o * c + k];
                    let src = &xd[(s * c + k) * hw..(s * c + k + 1) * hw];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = *d + wv * v;
                    }
                }
            }
        }
        let v = Tensor::new([n, co, h, wd], out)?;
        self.push("pointwise_conv", v, Op::PointwiseConv { x: ix, w: iw, b: ib })
    }

    /// Dense 2-D convolution without bias, `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (n, c, h, wd) = self.nodes[ix].value.dims4()?;
        let (co, ci, kh, kw) = self.nodes[iw].value.dims4()?;
        if ci != c || kh != kw || stride == 0 {
            return Err(invalid_arg!("conv2d: bad weight {:?} for input {:?}", [co, ci, kh, kw], [n, c, h, wd]));
        }
        let k = kh;
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid_arg!("conv2d: kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let xd = self.nodes[ix].value.data();
        let wt = self.nodes[iw].value.data();
        let mut out = vec![T::zero(); n * co * ho * wo];
        for s in 0..n {
            for o in 0..co {
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = T::zero();
                        for cc in 0..c {
                            for ky in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ixx = (xo * stride + kx) as isize - pad as isize;
                                    if ixx < 0 || ixx >= wd as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + wt[((o * c + cc) * k + ky) * k + kx]
                                            * xd[((s * c + cc) * h + iy as usize) * wd + ixx as usize];
                                }
                            }
                        }
                        out[((s * co + o) * ho + y) * wo + xo] = acc;
                    }
                }
            }
        }
        let v = Tensor::new([n, co, ho, wo], out)?;
        self.push("conv2d", v, Op::Conv2d { x: ix, w: iw, stride, pad })
    }

    /// Per-channel `k x k` convolution with zero padding `k/2`, `w: [C, k, k]`.
    /// Output spatial extent is `ceil(H / stride)`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let (n, c, h, wd) = self.nodes[ix].value.dims4()?;
        let wshape = self.nodes[iw].value.shape();
        let k = match wshape {
            &[wc, kh, kw] if wc == c && kh == kw => kh,
            s => return Err(invalid_arg!("depthwise weight {:?} does not match {c} channels", s)),
        };
        if k % 2 == 0 {
            return Err(invalid_arg!("depthwise kernel must be odd, got {k}"));
        }
        if !(1..=2).contains(&stride) {
            return Err(invalid_arg!("depthwise stride must be 1 or 2, got {stride}"));
        }
        let p = k / 2;
        let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
        let xd = self.nodes[ix].value.data();
        let wt = self.nodes[iw].value.data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for s in 0..n {
            for cc in 0..c {
                let plane = &xd[(s * c + cc) * h * wd..(s * c + cc + 1) * h * wd];
                let ker = &wt[cc * k * k..(cc + 1) * k * k];
                for y in 0..ho {
                    for xo in 0..wo {
                        let mut acc = T::zero();
                        for ky in 0..k {
                            let iy = (y * stride + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ixx = (xo * stride + kx) as isize - p as isize;
                                if ixx < 0 || ixx >= wd as isize {
                                    continue;
                                }
                                acc = acc + ker[ky * k + kx] * plane[iy as usize * wd + ixx as usize];
                            }
                        }
                        out[((s * c + cc) * ho + y) * wo + xo] = acc;
                    }
                }
            }
        }
        let v = Tensor::new([n, c, ho, wo], out)?;
        self.push("depthwise_conv", v, Op::DepthwiseConv { x: ix, w: iw, stride })
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, c, h, w) = self.nodes[ix].value.dims4()?;
        if h == 0 || w == 0 {
            return Err(invalid_arg!("global average pool over empty spatial extent"));
        }
        let hw = h * w;
        let xd = self.nodes[ix].value.data();
        let inv = T::of(1.0 / hw as f64);
        let out = (0..n * c).map(|i| pairwise_sum(&xd[i * hw..(i + 1) * hw]) * inv).collect();
        let v = Tensor::new([n, c], out)?;
        self.push("global_avg_pool", v, Op::GlobalAvgPool(ix))
    }

    /// 1-D convolution along the channel axis of `[N, C]` with zero padding
    /// `k/2`: `out[n,c] = sum_j w[j] v[n, c + j - k/2] + b`.
    pub fn channel_conv1d(&mut self, v: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (iv, iw) = (self.idx(v)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let (n, c) = self.nodes[iv].value.dims2()?;
        let k = match self.nodes[iw].value.shape() {
            &[k] => k,
            s => return Err(invalid_arg!("conv1d kernel must be rank 1, got {:?}", s)),
        };
        if k % 2 == 0 {
            return Err(invalid_arg!("conv1d kernel width must be odd, got {k}"));
        }
        let bias = match ib {
            Some(ib) => self.nodes[ib].value.item()?,
            None => T::zero(),
        };
        let p = k / 2;
        let vd = self.nodes[iv].value.data();
        let wt = self.nodes[iw].value.data();
        let mut out = vec![bias; n * c];
        for s in 0..n {
            for ch in 0..c {
                let mut acc = T::zero();
                for (j, &wj) in wt.iter().enumerate() {
                    let src = ch as isize + j as isize - p as isize;
                    if (0..c as isize).contains(&src) {
                        acc = acc + wj * vd[s * c + src as usize];
                    }
                }
                out[s * c + ch] = out[s * c + ch] + acc;
            }
        }
        let t = Tensor::new([n, c], out)?;
        self.push("channel_conv1d", t, Op::ChannelConv1d { v: iv, w: iw, b: ib })
    }

    // ---- normalisation -------------------------------------------------

    /// Training-mode batch norm over every axis except 1. Returns the output
    /// and the batch statistics so the caller can update running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnBatchStats<T>)> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xt = &self.nodes[ix].value;
        if xt.rank() < 2 {
            return Err(invalid_arg!("batch norm needs [N, C, ...], got {:?}", xt.shape()));
        }
        let (outer, c, inner) = channel_split(xt.shape());
        self.check_channel_param(ig, c)?;
        self.check_channel_param(ib, c)?;
        let count = outer * inner;
        if count < 2 {
            return Err(invalid_arg!("training batch norm needs at least 2 values per channel"));
        }
        let xd = xt.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut buf = Vec::with_capacity(count);
        for ch in 0..c {
            buf.clear();
            for o in 0..outer {
                buf.extend_from_slice(&xd[(o * c + ch) * inner..(o * c + ch + 1) * inner]);
            }
            let m = pairwise_sum(&buf) / T::of(count as f64);
            buf.iter_mut().for_each(|v| *v = (*v - m) * (*v - m));
            mean[ch] = m;
            var[ch] = pairwise_sum(&buf) / T::of(count as f64);
        }
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(ix, ig, ib, &mean, &inv_std);
        let v = Tensor::new(self.nodes[ix].value.shape().to_vec(), out)?;
        let y = self.push("batch_norm", v, Op::BatchNorm { x: ix, gamma: ig, beta: ib, xhat, inv_std, batch: true })?;
        Ok((y, BnBatchStats { mean, var, count }))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (_, c, _) = channel_split(self.nodes[ix].value.shape());
        self.check_channel_param(ig, c)?;
        self.check_channel_param(ib, c)?;
        if mean.len() != c || var.len() != c {
            return Err(invalid_arg!("running statistics must have {c} entries"));
        }
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(ix, ig, ib, mean, &inv_std);
        let v = Tensor::new(self.nodes[ix].value.shape().to_vec(), out)?;
        self.push("batch_norm", v, Op::BatchNorm { x: ix, gamma: ig, beta: ib, xhat, inv_std, batch: false })
    }

    fn bn_apply(&self, ix: usize, ig: usize, ib: usize, mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
        let xt = &self.nodes[ix].value;
        let (_, c, inner) = channel_split(xt.shape());
        let g = self.nodes[ig].value.data();
        let b = self.nodes[ib].value.data();
        let mut xhat = Vec::with_capacity(xt.len());
        let mut out = Vec::with_capacity(xt.len());
        for (i, &v) in xt.data().iter().enumerate() {
            let ch = (i / inner) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(g[ch] * h + b[ch]);
        }
        (out, xhat)
    }

    fn check_channel_param(&self, i: usize, c: usize) -> Result<()> {
        if self.nodes[i].value.shape() != [c] {
            return Err(invalid_arg!(
                "per-channel parameter must have shape [{c}], got {:?}",
                self.nodes[i].value.shape()
            ));
        }
        Ok(())
    }

    /// Per-channel bounded curve with affine output:
    /// `y = curve(alpha * x) * w + b`, channel axis 1.
    pub fn dynorm(&mut self, x: Var, alpha: Var, w: Var, b: Var, curve: CurveKind) -> Result<Var> {
        let ix = self.idx(x)?;
        let (ia, iw, ib) = (self.idx(alpha)?, self.idx(w)?, self.idx(b)?);
        let xt = &self.nodes[ix].value;
        let (_, c, inner) = channel_split(xt.shape());
        for i in [ia, iw, ib] {
            self.check_channel_param(i, c)?;
        }
        let (a, wv, bv) = (self.nodes[ia].value.data(), self.nodes[iw].value.data(), self.nodes[ib].value.data());
        let out = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                curve.eval(a[ch] * v) * wv[ch] + bv[ch]
            })
            .collect();
        let v = Tensor::new(xt.shape().to_vec(), out)?;
        self.push("dynorm", v, Op::DyNorm { x: ix, alpha: ia, w: iw, b: ib, curve })
    }

    // ---- dense layers and losses ------------------------------------

    /// `x: [N, F]`, `w: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let (n, f) = self.nodes[ix].value.dims2()?;
        let (o, fi) = self.nodes[iw].value.dims2()?;
        if f != fi {
            return Err(invalid_arg!("linear expects {fi} features, got {f}"));
        }
        if let Some(ib) = ib {
            self.check_channel_param(ib, o)?;
        }
        let xd = self.nodes[ix].value.data();
        let wt = self.nodes[iw].value.data();
        let mut out = vec![T::zero(); n * o];
        for s in 0..n {
            for j in 0..o {
                let mut acc = ib.map_or(T::zero(), |ib| self.nodes[ib].value.data()[j]);
                for k in 0..f {
                    acc = acc + wt[j * f + k] * xd[s * f + k];
                }
                out[s * o + j] = acc;
            }
        }
        let v = Tensor::new([n, o], out)?;
        self.push("linear", v, Op::Linear { x: ix, w: iw, b: ib })
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xt = &self.nodes[ix].value;
        let c = *xt.shape().last().ok_or_else(|| invalid_arg!("softmax of a scalar"))?;
        if c == 0 {
            return Err(invalid_arg!("softmax over empty axis"));
        }
        let mut out = Vec::with_capacity(xt.len());
        for row in xt.data().chunks(c) {
            out.extend(softmax_row(row));
        }
        let v = Tensor::new(xt.shape().to_vec(), out)?;
        self.push("softmax", v, Op::Softmax(ix))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (n, c) = self.nodes[il].value.dims2()?;
        if n == 0 {
            return Err(invalid_arg!("cross entropy over an empty batch"));
        }
        if labels.len() != n {
            return Err(invalid_arg!("{} labels for batch of {n}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid_arg!("label {bad} out of range for {c} classes"));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut nll = Vec::with_capacity(n);
        for (row, &l) in self.nodes[il].value.data().chunks(c).zip(labels) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            nll.push(lse - row[l]);
            probs.extend(softmax_row(row));
        }
        let loss = pairwise_sum(&nll) / T::of(n as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits: il, labels: labels.to_vec(), probs },
        )
    }

    // ---- selection and cross-Hadamard --------------------------------

    /// Straight-through estimator: the forward value is
    /// `hard + (soft - soft_ref)` and the backward pass is the identity to
    /// `soft`. With `soft_ref` equal to the current value of `soft` the
    /// output is exactly `hard`.
    pub fn straight_through(&mut self, soft: Var, hard: &Tensor<T>, soft_ref: &Tensor<T>) -> Result<Var> {
        let is = self.idx(soft)?;
        let st = &self.nodes[is].value;
        st.expect_same_shape(hard)?;
        st.expect_same_shape(soft_ref)?;
        let out = st
            .data()
            .iter()
            .zip(hard.data())
            .zip(soft_ref.data())
            .map(|((&s, &h), &r)| h + (s - r))
            .collect();
        let v = Tensor::new(st.shape().to_vec(), out)?;
        self.push("straight_through", v, Op::StraightThrough(is))
    }

    /// Mapping-matrix product `Z = (M' . diag(mask)) X`, realised as a gather:
    /// `z[n,s] = x[n, S_n[s]] * mask[n, S_n[s]]`.
    pub fn gather_channels(&mut self, x: Var, mask: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let (ix, im) = (self.idx(x)?, self.idx(mask)?);
        let (n, c, h, w) = self.nodes[ix].value.dims4()?;
        if self.nodes[im].value.shape() != [n, c] {
            return Err(invalid_arg!("mask must have shape [{n}, {c}]"));
        }
        if indices.len() != n {
            return Err(invalid_arg!("need one index list per sample"));
        }
        let cs = indices.first().map_or(0, Vec::len);
        if indices.iter().any(|s| s.len() != cs || s.iter().any(|&i| i >= c)) {
            return Err(invalid_arg!("index lists must share a length and stay below {c}"));
        }
        let hw = h * w;
        let xd = self.nodes[ix].value.data();
        let md = self.nodes[im].value.data();
        let mut out = Vec::with_capacity(n * cs * hw);
        for (s, sel) in indices.iter().enumerate() {
            for &ch in sel {
                let m = md[s * c + ch];
                out.extend(xd[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().map(|&v| v * m));
            }
        }
        let v = Tensor::new([n, cs, h, w], out)?;
        self.push("gather_channels", v, Op::GatherChannels { x: ix, mask: im, indices: indices.to_vec() })
    }

    /// `[N, Cs, H, W] -> [N, Cs(Cs-1)/2, H, W]`, output channel `p` is
    /// `z_i * z_j` for the `p`-th pair `i < j` in row-major order.
    pub fn cross_hadamard(&mut self, z: Var) -> Result<Var> {
        let iz = self.idx(z)?;
        let out = crate::ach::cross_hadamard_values(&self.nodes[iz].value)?;
        self.push("cross_hadamard", out, Op::CrossHadamard(iz))
    }

    /// Concatenate along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(invalid_arg!("cannot concatenate {:?} and {:?} along channels", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let (n, ca, inner) = channel_split(sa);
        let cb = sb[1];
        let (ad, bd) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for s in 0..n {
            out.extend_from_slice(&ad[s * ca * inner..(s + 1) * ca * inner]);
            out.extend_from_slice(&bd[s * cb * inner..(s + 1) * cb * inner]);
        }
        let v = Tensor::new(shape, out)?;
        self.push("concat_channels", v, Op::ConcatChannels(ia, ib))
    }
}

#[inline]
fn hardswish<T: Scalar>(x: T) -> T {
    let three = T::of(3.0);
    x * (x + three).max(T::zero()).min(T::of(6.0)) / T::of(6.0)
}

#[inline]
fn hardswish_grad<T: Scalar>(x: T) -> T {
    let three = T::of(3.0);
    if x <= -three {
        T::zero()
    } else if x >= three {
        T::one()
    } else {
        (x + x + three) / T::of(6.0)
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl<T: Scalar> Op<T> {
    /// Gradient contributions `(parent, d loss / d parent)` given the
    /// upstream gradient `g` of this node's output `out`.
    pub(crate) fn backward(&self, nodes: &[Node<T>], out: &Tensor<T>, g: &Tensor<T>) -> Vec<(usize, Vec<T>)> {
        let val = |i: usize| &nodes[i].value;
        let gd = g.data();
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, gd.to_vec()), (*b, gd.to_vec())],
            Op::Sub(a, b) => vec![(*a, gd.to_vec()), (*b, gd.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let da = gd.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else if x < T::zero() { -g } else { T::zero() })
                    .collect();
                vec![(*a, d)]
            }
            Op::Scale(a, s) => vec![(*a, gd.iter().map(|&v| v * *s).collect())],
            Op::Sum(a) => vec![(*a, vec![gd[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![gd[0] / T::of(n as f64); n])]
            }
            Op::Relu(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect();
                vec![(*a, d)]
            }
            Op::HardSwish(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(&g, &x)| g * hardswish_grad(x)).collect();
                vec![(*a, d)]
            }
            Op::PointwiseConv { x, w, b } => {
                let xt = val(*x);
                let (n, c, h, wd) = xt.dims4().expect("rank 4");
                let wt = val(*w).data();
                let co = wt.len() / c;
                let hw = h * wd;
                let xd = xt.data();
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wt.len()];
                for s in 0..n {
                    for o in 0..co {
                        let go = &gd[(s * co + o) * hw..(s * co + o + 1) * hw];
                        for k in 0..c {
                            let xs = &xd[(s * c + k) * hw..(s * c + k + 1) * hw];
                            let wv = wt[o * c + k];
                            let mut acc = T::zero();
                            let dxs = &mut dx[(s * c + k) * hw..(s * c + k + 1) * hw];
                            for ((d, &gv), &xv) in dxs.iter_mut().zip(go).zip(xs) {
                                *d = *d + wv * gv;
                                acc = acc + gv * xv;
                            }
                            dw[o * c + k] = dw[o * c + k] + acc;
                        }
                    }
                }
                let mut res = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    let mut db = vec![T::zero(); co];
                    for s in 0..n {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d = *d + pairwise_sum(&gd[(s * co + o) * hw..(s * co + o + 1) * hw]);
                        }
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (n, c, h, wd) = val(*x).dims4().expect("rank 4");
                let (co, _, k, _) = val(*w).dims4().expect("rank 4");
                let (_, _, ho, wo) = out.dims4().expect("rank 4");
                let (xd, wt) = (val(*x).data(), val(*w).data());
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wt.len()];
                for s in 0..n {
                    for o in 0..co {
                        for y in 0..ho {
                            for xo in 0..wo {
                                let gv = gd[((s * co + o) * ho + y) * wo + xo];
                                for cc in 0..c {
                                    for ky in 0..k {
                                        let iy = (y * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ixx = (xo * stride + kx) as isize - *pad as isize;
                                            if ixx < 0 || ixx >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((s * c + cc) * h + iy as usize) * wd + ixx as usize;
                                            let wi = ((o * c + cc) * k + ky) * k + kx;
                                            dx[xi] = dx[xi] + gv * wt[wi];
                                            dw[wi] = dw[wi] + gv * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx), (*w, dw)]
            }
            Op::DepthwiseConv { x, w, stride } => {
                let (n, c, h, wd) = val(*x).dims4().expect("rank 4");
                let k = val(*w).shape()[1];
                let p = k / 2;
                let (_, _, ho, wo) = out.dims4().expect("rank 4");
                let (xd, wt) = (val(*x).data(), val(*w).data());
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wt.len()];
                for s in 0..n {
                    for cc in 0..c {
                        for y in 0..ho {
                            for xo in 0..wo {
                                let gv = gd[((s * c + cc) * ho + y) * wo + xo];
                                for ky in 0..k {
                                    let iy = (y * stride + ky) as isize - p as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ixx = (xo * stride + kx) as isize - p as isize;
                                        if ixx < 0 || ixx >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((s * c + cc) * h + iy as usize) * wd + ixx as usize;
                                        let wi = (cc * k + ky) * k + kx;
                                        dx[xi] = dx[xi] + gv * wt[wi];
                                        dw[wi] = dw[wi] + gv * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx), (*w, dw)]
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = val(*x).dims4().expect("rank 4");
                let hw = h * w;
                let inv = T::of(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(n * c * hw);
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                vec![(*x, dx)]
            }
            Op::ChannelConv1d { v, w, b } => {
                let (n, c) = val(*v).dims2().expect("rank 2");
                let (vd, wt) = (val(*v).data(), val(*w).data());
                let p = wt.len() / 2;
                let mut dv = vec![T::zero(); vd.len()];
                let mut dw = vec![T::zero(); wt.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let gv = gd[s * c + ch];
                        for (j, &wj) in wt.iter().enumerate() {
                            let src = ch as isize + j as isize - p as isize;
                            if (0..c as isize).contains(&src) {
                                let si = s * c + src as usize;
                                dv[si] = dv[si] + wj * gv;
                                dw[j] = dw[j] + gv * vd[si];
                            }
                        }
                    }
                }
                let mut res = vec![(*v, dv), (*w, dw)];
                if let Some(b) = b {
                    res.push((*b, vec![pairwise_sum(gd)]));
                }
                res
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let (outer, c, inner) = channel_split(val(*x).shape());
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for (i, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                    let ch = (i / inner) % c;
                    dgamma[ch] = dgamma[ch] + gv * xh;
                    dbeta[ch] = dbeta[ch] + gv;
                    let dxh = gv * gam[ch];
                    sum_dxhat[ch] = sum_dxhat[ch] + dxh;
                    sum_dxhat_xhat[ch] = sum_dxhat_xhat[ch] + dxh * xh;
                }
                let m = T::of((outer * inner) as f64);
                let dx = gd
                    .iter()
                    .zip(xhat)
                    .enumerate()
                    .map(|(i, (&gv, &xh))| {
                        let ch = (i / inner) % c;
                        let dxh = gv * gam[ch];
                        if *batch {
                            inv_std[ch] * (dxh - sum_dxhat[ch] / m - xh * sum_dxhat_xhat[ch] / m)
                        } else {
                            inv_std[ch] * dxh
                        }
                    })
                    .collect();
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::DyNorm { x, alpha, w, b, curve } => {
                let xt = val(*x);
                let (_, c, inner) = channel_split(xt.shape());
                let (a, wv) = (val(*alpha).data(), val(*w).data());
                let mut dx = Vec::with_capacity(xt.len());
                let mut da = vec![T::zero(); c];
                let mut dw = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let sign = if DYNORM_SIGN_FAULT.with(Cell::get) { -T::one() } else { T::one() };
                for (i, (&gv, &xv)) in gd.iter().zip(xt.data()).enumerate() {
                    let ch = (i / inner) % c;
                    let u = a[ch] * xv;
                    let slope = curve.derivative(u);
                    dx.push(sign * gv * wv[ch] * a[ch] * slope);
                    da[ch] = da[ch] + gv * wv[ch] * xv * slope;
                    dw[ch] = dw[ch] + gv * curve.eval(u);
                    db[ch] = db[ch] + gv;
                }
                vec![(*x, dx), (*alpha, da), (*w, dw), (*b, db)]
            }
            Op::Linear { x, w, b } => {
                let (n, f) = val(*x).dims2().expect("rank 2");
                let (xd, wt) = (val(*x).data(), val(*w).data());
                let o = wt.len() / f;
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wt.len()];
                let mut db = vec![T::zero(); o];
                for s in 0..n {
                    for j in 0..o {
                        let gv = gd[s * o + j];
                        db[j] = db[j] + gv;
                        for k in 0..f {
                            dx[s * f + k] = dx[s * f + k] + gv * wt[j * f + k];
                            dw[j * f + k] = dw[j * f + k] + gv * xd[s * f + k];
                        }
                    }
                }
                let mut res = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    res.push((*b, db));
                }
                res
            }
            Op::Softmax(x) => {
                let c = *out.shape().last().expect("non-scalar");
                let mut dx = Vec::with_capacity(out.len());
                for (y, gr) in out.data().chunks(c).zip(gd.chunks(c)) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(y.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                vec![(*x, dx)]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = gd[0] / T::of(n as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (s, &l) in labels.iter().enumerate() {
                    d[s * c + l] = d[s * c + l] - scale;
                }
                vec![(*logits, d)]
            }
            Op::StraightThrough(s) => vec![(*s, gd.to_vec())],
            Op::GatherChannels { x, mask, indices } => {
                let (_, c, h, w) = val(*x).dims4().expect("rank 4");
                let hw = h * w;
                let (xd, md) = (val(*x).data(), val(*mask).data());
                let mut dx = vec![T::zero(); xd.len()];
                let mut dm = vec![T::zero(); md.len()];
                let cs = indices.first().map_or(0, Vec::len);
                for (s, sel) in indices.iter().enumerate() {
                    for (slot, &ch) in sel.iter().enumerate() {
                        let go = &gd[(s * cs + slot) * hw..(s * cs + slot + 1) * hw];
                        let xs = &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        let m = md[s * c + ch];
                        let mut acc = T::zero();
                        for ((d, &gv), &xv) in dx[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter_mut().zip(go).zip(xs) {
                            *d = *d + gv * m;
                            acc = acc + gv * xv;
                        }
                        dm[s * c + ch] = dm[s * c + ch] + acc;
                    }
                }
                vec![(*x, dx), (*mask, dm)]
            }
            Op::CrossHadamard(z) => {
                let (n, cs, h, w) = val(*z).dims4().expect("rank 4");
                let hw = h * w;
                let zd = val(*z).data();
                let pairs = PairMap::new(cs).expect("validated in forward");
                let np = pairs.total();
                let mut dz = vec![T::zero(); zd.len()];
                for s in 0..n {
                    for (p, (i, j)) in pairs.iter().enumerate() {
                        let go = &gd[(s * np + p) * hw..(s * np + p + 1) * hw];
                        let (zi, zj) = ((s * cs + i) * hw, (s * cs + j) * hw);
                        for t in 0..hw {
                            dz[zi + t] = dz[zi + t] + go[t] * zd[zj + t];
                            dz[zj + t] = dz[zj + t] + go[t] * zd[zi + t];
                        }
                    }
                }
                vec![(*z, dz)]
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, inner) = channel_split(val(*a).shape());
                let cb = val(*b).shape()[1];
                let mut da = Vec::with_capacity(val(*a).len());
                let mut db = Vec::with_capacity(val(*b).len());
                let row = (ca + cb) * inner;
                for s in 0..n {
                    da.extend_from_slice(&gd[s * row..s * row + ca * inner]);
                    db.extend_from_slice(&gd[s * row + ca * inner..(s + 1) * row]);
                }
                vec![(*a, da), (*b, db)]
            }
        }
    }
}
