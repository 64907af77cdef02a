//! Differentiable discrete channel selection: Gumbel perturbation, tempered
//! softmax, hard top-k with a straight-through gradient, and temperature
//! control (gradient-norm tracking and fixed annealing schedules).

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid_arg, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 4.0;
pub const TAU_INIT: f64 = 1.0;
pub const TAU_ALPHA: f64 = 0.01;
/// Uniform draws are confined to `(U_EPS, 1 - U_EPS)`.
pub const U_EPS: f64 = 1e-12;

/// `-ln(-ln u)` for `u` in `(0, 1)`.
pub fn gumbel_noise(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(invalid_arg!("gumbel transform needs u in (0, 1), got {u}"));
    }
    Ok(-(-u.ln()).ln())
}

/// Seedable source of standard Gumbel noise. Each module owns a separate
/// stream of the same seed so adding modules never shifts another
/// module's draws.
#[derive(Clone, Debug)]
pub struct GumbelStream {
    rng: ChaCha8Rng,
}

impl GumbelStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random_range(U_EPS..1.0 - U_EPS)
    }

    pub fn sample(&mut self) -> f64 {
        gumbel_noise(self.uniform()).expect("uniform draw is inside (0, 1)")
    }

    pub fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape.to_vec(), |_| T::of(self.sample()))
    }
}

/// `softmax((xi + noise) / tau)` on plain vectors.
pub fn soft_probs_values<T: Scalar>(xi: &[T], noise: &[T], tau: f64) -> Result<Vec<T>> {
    if !(tau > 0.0) {
        return Err(invalid_arg!("temperature must be positive, got {tau}"));
    }
    if xi.len() != noise.len() {
        return Err(invalid_arg!("scores and noise differ in length"));
    }
    let t = T::of(tau);
    let logits: Vec<T> = xi.iter().zip(noise).map(|(&a, &b)| (a + b) / t).collect();
    Ok(crate::autodiff::softmax_row(&logits))
}

/// Tempered Gumbel softmax on the tape, row-wise over the last axis.
pub fn soft_probs<T: Scalar>(tape: &mut Tape<T>, xi: Var, noise: &Tensor<T>, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(invalid_arg!("temperature must be positive, got {tau}"));
    }
    let noise = tape.leaf(noise.clone());
    let perturbed = tape.add(xi, noise)?;
    let scaled = tape.scale(perturbed, T::of(1.0 / tau))?;
    tape.softmax(scaled)
}

/// Indices of the `k` largest values, ties resolved towards the lower
/// index, returned in ascending index order.
pub fn top_k<T: Scalar>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(invalid_arg!("top-k needs 1 <= k <= {}, got {k}", values.len()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Hard top-k mask of one probability vector.
pub fn hard_topk<T: Scalar>(probs: &[T], k: usize) -> Result<(Vec<T>, Vec<usize>)> {
    let idx = top_k(probs, k)?;
    let mut mask = vec![T::zero(); probs.len()];
    for &i in &idx {
        mask[i] = T::one();
    }
    Ok((mask, idx))
}

/// Row-wise hard top-k of `probs` (last axis) with a straight-through
/// gradient. Returns the mask variable, its value, and per-row indices.
pub fn hard_topk_ste<T: Scalar>(tape: &mut Tape<T>, probs: Var, k: usize) -> Result<(Var, Tensor<T>, Vec<Vec<usize>>)> {
    let pv = tape.value(probs).clone();
    let c = *pv.shape().last().ok_or_else(|| invalid_arg!("top-k of a scalar"))?;
    let mut hard = Vec::with_capacity(pv.len());
    let mut indices = Vec::new();
    for row in pv.data().chunks(c) {
        let (m, idx) = hard_topk(row, k)?;
        hard.extend(m);
        indices.push(idx);
    }
    let hard = Tensor::new(pv.shape().to_vec(), hard)?;
    let mask = tape.straight_through(probs, &hard, &pv)?;
    Ok((mask, hard, indices))
}

/// Deterministic top-k of raw scores, used at inference.
pub fn inference_select<T: Scalar>(xi: &[T], k: usize) -> Result<Vec<usize>> {
    top_k(xi, k)
}

/// Selection state of one module: last scores, soft and hard masks,
/// selected indices, and the temperature controller.
#[derive(Clone, Debug)]
pub struct SelectionState<T> {
    /// Channel scores, `[N, C]`.
    pub xi: Tensor<T>,
    /// Soft distribution, `[N, C]`; empty at inference.
    pub probs: Tensor<T>,
    /// 0/1 mask with exactly `k` ones per row.
    pub hard: Tensor<T>,
    /// Selected channels per sample, ascending.
    pub indices: Vec<Vec<usize>>,
    pub tau: f64,
    /// Last observed gradient norm; zero until the first observation.
    pub tau_hist: f64,
    pub alpha: f64,
    pub k: usize,
}

impl<T: Scalar> SelectionState<T> {
    pub fn new(k: usize) -> Self {
        Self {
            xi: Tensor::zeros([0]),
            probs: Tensor::zeros([0]),
            hard: Tensor::zeros([0]),
            indices: Vec::new(),
            tau: TAU_INIT,
            tau_hist: 0.0,
            alpha: TAU_ALPHA,
            k,
        }
    }

    /// Gradient-norm tracking: once a history exists, `tau` grows by a
    /// factor `1 + alpha` when the norm did not fall and shrinks by
    /// `1 - alpha` otherwise, clamped to `[TAU_MIN, TAU_MAX]`. The norm
    /// then becomes the new history. `None` (no gradient) is a no-op.
    pub fn adjust_tau(&mut self, grad_norm: Option<f64>) {
        let Some(norm) = grad_norm else { return };
        if self.tau_hist != 0.0 {
            let delta = if norm >= self.tau_hist { 1.0 } else { -1.0 };
            self.tau = (self.tau * (1.0 + self.alpha * delta)).clamp(TAU_MIN, TAU_MAX);
        }
        self.tau_hist = norm;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealKind {
    Linear,
    Exponential,
    Cosine,
}

impl FromStr for AnnealKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "exponential" | "exp" => Ok(Self::Exponential),
            "cosine" | "cos" => Ok(Self::Cosine),
            _ => Err(invalid_arg!("unknown anneal schedule `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub kind: AnnealKind,
    pub tau_max: f64,
    pub tau_min: f64,
    pub epochs: usize,
}

/// Temperature at epoch `e` of `sched`. Endpoints are returned exactly.
pub fn anneal_tau(e: usize, sched: &AnnealSchedule) -> Result<f64> {
    let AnnealSchedule { kind, tau_max, tau_min, epochs } = *sched;
    if !(tau_min > 0.0 && tau_max >= tau_min) {
        return Err(invalid_arg!("need tau_max >= tau_min > 0, got {tau_max}, {tau_min}"));
    }
    if e > epochs {
        return Err(invalid_arg!("epoch {e} beyond schedule length {epochs}"));
    }
    if e == 0 {
        return Ok(tau_max);
    }
    if e == epochs {
        return Ok(tau_min);
    }
    let t = e as f64 / epochs as f64;
    let tau = match kind {
        AnnealKind::Linear => tau_max - (tau_max - tau_min) * t,
        AnnealKind::Exponential => tau_max * (tau_min / tau_max).powf(t),
        AnnealKind::Cosine => tau_min + 0.5 * (tau_max - tau_min) * (1.0 + (PI * t).cos()),
    };
    Ok(tau.clamp(tau_min, tau_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamSet;
    use proptest::prelude::*;

    #[test]
    fn gumbel_fixed_point_and_domain() {
        assert!(gumbel_noise((-1.0f64).exp()).unwrap().abs() < 1e-15);
        assert!(gumbel_noise(0.0).is_err());
        assert!(gumbel_noise(1.0).is_err());
        assert!(gumbel_noise(1e-300).unwrap() < -6.0);
        assert!(gumbel_noise(1.0 - 1e-12).unwrap() > 27.0);
        let mut prev = f64::NEG_INFINITY;
        for i in 1..100 {
            let v = gumbel_noise(i as f64 / 100.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut s = GumbelStream::new(7, 0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| s.sample()).sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn streams_are_independent_of_each_other() {
        let a: Vec<f64> = {
            let mut s = GumbelStream::new(3, 1);
            (0..5).map(|_| s.sample()).collect()
        };
        let mut other = GumbelStream::new(3, 0);
        let _ = (0..100).map(|_| other.sample()).count();
        let mut again = GumbelStream::new(3, 1);
        let b: Vec<f64> = (0..5).map(|_| again.sample()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn soft_probs_uniform_and_cold() {
        let p = soft_probs_values(&[0.3f64; 5], &[0.0; 5], 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let p = soft_probs_values(&[0.1f64, 0.5, 0.2], &[0.0; 3], 1e-3).unwrap();
        assert!(p[1] > 0.999);
        assert!(soft_probs_values(&[0.1f64], &[0.0], 0.0).is_err());
    }

    #[test]
    fn topk_examples() {
        let (m, i) = hard_topk(&[0.1f64, 0.5, 0.4], 1).unwrap();
        assert_eq!((m, i), (vec![0.0, 1.0, 0.0], vec![1]));
        let (m, _) = hard_topk(&[0.1f64, 0.5, 0.4], 3).unwrap();
        assert_eq!(m, vec![1.0; 3]);
        assert_eq!(inference_select(&[3.0f64, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_k(&[1.0f64, 2.0, 2.0, 2.0], 2).unwrap(), vec![1, 2]);
        assert!(top_k(&[1.0f64], 0).is_err());
        assert!(top_k(&[1.0f64], 2).is_err());
    }

    #[test]
    fn adjust_tau_rules() {
        let mut s = SelectionState::<f64>::new(2);
        s.tau_hist = 1.0;
        s.adjust_tau(Some(2.0));
        assert!((s.tau - 1.01).abs() < 1e-15);
        assert_eq!(s.tau_hist, 2.0);

        let mut s = SelectionState::<f64>::new(2);
        s.tau = 4.0;
        s.tau_hist = 1.0;
        s.adjust_tau(Some(3.0));
        assert_eq!(s.tau, 4.0);

        let mut s = SelectionState::<f64>::new(2);
        s.adjust_tau(Some(5.0));
        assert_eq!((s.tau, s.tau_hist), (1.0, 5.0));
        s.adjust_tau(Some(5.0));
        assert!((s.tau - 1.01).abs() < 1e-15, "equality counts as growth");
        s.adjust_tau(None);
        assert_eq!(s.tau_hist, 5.0);
        s.adjust_tau(Some(1.0));
        assert!(s.tau < 1.01);
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        for kind in [AnnealKind::Linear, AnnealKind::Exponential, AnnealKind::Cosine] {
            let s = AnnealSchedule { kind, tau_max: 4.0, tau_min: 0.1, epochs: 30 };
            assert_eq!(anneal_tau(0, &s).unwrap(), 4.0);
            assert_eq!(anneal_tau(30, &s).unwrap(), 0.1);
            assert!(anneal_tau(31, &s).is_err());
        }
        let s = AnnealSchedule { kind: AnnealKind::Cosine, tau_max: 4.0, tau_min: 0.1, epochs: 30 };
        assert!((anneal_tau(15, &s).unwrap() - 2.05).abs() < 1e-12);
    }

    #[test]
    fn ste_gradient_equals_softmax_jacobian_product() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = 8;
            let xi: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let up: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tau = rng.random_range(0.3..2.0);
            let mut params = ParamSet::new();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new([c], xi.clone()).unwrap());
            let p = soft_probs(&mut tape, x, &Tensor::zeros([c]), tau).unwrap();
            let (mask, _, _) = hard_topk_ste(&mut tape, p, 3).unwrap();
            let w = tape.leaf(Tensor::new([c], up.clone()).unwrap());
            let prod = tape.mul(mask, w).unwrap();
            let loss = tape.sum(prod).unwrap();
            let g = tape.backward(loss, &mut params).unwrap();
            let got = g.get(x).unwrap().data().to_vec();

            // dL/dxi_b = sum_a up_a * M_a (delta_ab - M_b) / tau
            let m = soft_probs_values(&xi, &vec![0.0; c], tau).unwrap();
            for b in 0..c {
                let want: f64 =
                    (0..c).map(|a| up[a] * m[a] * (if a == b { 1.0 } else { 0.0 } - m[b]) / tau).sum();
                assert!((got[b] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    proptest! {
        #[test]
        fn probs_form_a_distribution(xi in prop::collection::vec(-50.0f64..50.0, 2..32), tau in TAU_MIN..TAU_MAX) {
            let zero = vec![0.0; xi.len()];
            let p = soft_probs_values(&xi, &zero, tau).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn shift_leaves_hard_mask_unchanged(
            xi in prop::collection::vec(-5.0f64..5.0, 4..16),
            shift in -100.0f64..100.0,
            k in 1usize..4,
        ) {
            let zero = vec![0.0; xi.len()];
            let shifted: Vec<f64> = xi.iter().map(|v| v + shift).collect();
            let a = hard_topk(&soft_probs_values(&xi, &zero, 1.0).unwrap(), k).unwrap().1;
            let b = hard_topk(&soft_probs_values(&shifted, &zero, 1.0).unwrap(), k).unwrap().1;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn tau_never_leaves_bounds(norms in prop::collection::vec(0.0f64..10.0, 1..200)) {
            let mut s = SelectionState::<f32>::new(1);
            for n in norms {
                s.adjust_tau(Some(n));
                prop_assert!((TAU_MIN..=TAU_MAX).contains(&s.tau));
            }
        }
    }
}
