//! Bounded dynamic normalisation and the moment formulas behind it.
//!
//! Products of two roughly normal channels have mean and variance that
//! depend multiplicatively on the inputs' statistics, so no fixed
//! standardisation tracks them. A bounded curve with a learnable affine
//! output keeps every product channel inside `(b - |w|, b + |w|)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CurveKind, ParamId, ParamSet, Tape, Var};
use crate::error::{invalid_arg, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel `y = curve(alpha * x) * w + b`.
#[derive(Clone, Debug)]
pub struct DyNorm {
    pub curve: CurveKind,
    pub alpha: ParamId,
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
}

impl DyNorm {
    /// Starts at `alpha = 1, w = 1, b = 0`.
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize, curve: CurveKind) -> Self {
        Self {
            curve,
            alpha: params.add(format!("{name}.alpha"), Tensor::ones([channels])),
            w: params.add(format!("{name}.w"), Tensor::ones([channels])),
            b: params.add(format!("{name}.b"), Tensor::zeros([channels])),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let a = tape.param(params, self.alpha);
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.dynorm(x, a, w, b, self.curve)
    }

    /// Re-draws the parameters around their initial values; used by tests
    /// that need generic (non-identity) parameters.
    pub fn jitter<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, spread: f64) {
        use rand::Rng;
        for (id, base) in [(self.alpha, 1.0), (self.w, 1.0), (self.b, 0.0)] {
            for v in params.get_mut(id).value.data_mut() {
                *v = T::of(base + rng.random_range(-spread..spread));
            }
        }
    }
}

/// Scalar evaluation of the normalisation curve with affine output.
pub fn dynorm_value(x: f64, alpha: f64, w: f64, b: f64, curve: CurveKind) -> f64 {
    curve.eval(alpha * x) * w + b
}

/// `dy/dx` of [`dynorm_value`].
pub fn dynorm_slope(x: f64, alpha: f64, w: f64, curve: CurveKind) -> f64 {
    alpha * w * curve.derivative(alpha * x)
}

/// Mean and variance of a scalar random variable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: f64,
    pub var: f64,
}

impl MomentPair {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        if !(var >= 0.0) {
            return Err(invalid_arg!("variance must be non-negative, got {var}"));
        }
        Ok(Self { mean, var })
    }

    fn check(self) -> Result<Self> {
        Self::new(self.mean, self.var)
    }
}

/// Moments of `a * b` for independent normal `a` and `b`:
/// mean `mu_a mu_b`, variance `mu_a^2 s_b^2 + mu_b^2 s_a^2 + s_a^2 s_b^2`.
pub fn cross_hadamard_moments(a: MomentPair, b: MomentPair) -> Result<MomentPair> {
    let (a, b) = (a.check()?, b.check()?);
    Ok(MomentPair {
        mean: a.mean * b.mean,
        var: a.mean * a.mean * b.var + b.mean * b.mean * a.var + a.var * b.var,
    })
}

/// Moments of `z^2` for normal `z`: mean `mu^2 + s^2`, variance
/// `2 s^2 (2 mu^2 + s^2)` from the normal fourth moment.
pub fn self_hadamard_moments(z: MomentPair) -> Result<MomentPair> {
    let z = z.check()?;
    let (m2, s2) = (z.mean * z.mean, z.var);
    Ok(MomentPair { mean: m2 + s2, var: 2.0 * s2 * (2.0 * m2 + s2) })
}

/// Averaged output moments of an affine map `A z + b` over i.i.d. inputs:
/// mean `mu * sum(A)/m + E[b]`, variance `s^2 * ||A||_F^2 / m`.
pub fn linear_map_moments(
    z: MomentPair,
    frobenius_sq_over_m: f64,
    mean_weight_sum: f64,
    bias_mean: f64,
) -> Result<MomentPair> {
    let z = z.check()?;
    if !(frobenius_sq_over_m >= 0.0) {
        return Err(invalid_arg!("Frobenius term must be non-negative"));
    }
    Ok(MomentPair { mean: z.mean * mean_weight_sum + bias_mean, var: z.var * frobenius_sq_over_m })
}
