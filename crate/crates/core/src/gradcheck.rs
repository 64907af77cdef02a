//! Central finite-difference checks for every tape operation and for the
//! composite layers.
//!
//! Each check builds a problem (inputs, parameters, forward closure),
//! reduces the output with `sum(r * y) + 0.5 * sum(y^2)` for a fixed random
//! `r`, and compares the tape gradient of every input and parameter
//! coordinate with `(L(x + h) - L(x - h)) / 2h`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ach::{AchConfig, AchLayer, AdaptiveBottleneck, Eca, GhostConfig, GhostModule, SelectPath};
use crate::arch::{BottleneckSpec, Expansion};
use crate::autodiff::{with_dynorm_sign_fault, CurveKind, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Mode, BN_EPS};
use crate::normalization::DyNorm;
use crate::tensor::{DType, Scalar, Tensor};

pub const TOL_F64: f64 = 1e-4;
pub const TOL_F32: f64 = 1e-2;
/// Difference step. 32-bit checks difference the 64-bit problem too.
pub const STEP: f64 = 1e-5;
/// Denominator floors of the relative error.
pub const REL_FLOOR_F64: f64 = 1e-6;
pub const REL_FLOOR_F32: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Op,
    Module,
    All,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "module" => Ok(Scope::Module),
            "all" => Ok(Scope::All),
            _ => Err(Error::InvalidArgument(format!("unknown scope `{s}` (op|module|all)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Module => "module",
            Scope::All => "all",
        })
    }
}

/// Step, tolerance and warning for a working precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub dtype: DType,
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    pub warning: Option<String>,
}

impl Policy {
    pub fn for_dtype(dtype: DType) -> Self {
        match dtype {
            DType::F64 => Self { dtype, step: STEP, tol: TOL_F64, floor: REL_FLOOR_F64, warning: None },
            DType::F32 => Self {
                dtype,
                step: STEP,
                tol: TOL_F32,
                floor: REL_FLOOR_F32,
                warning: Some(format!(
                    "32-bit gradients are compared with 64-bit finite differences; tolerance relaxed to {TOL_F32:e}"
                )),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub seed: u64,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub policy: Policy,
    pub records: Vec<CheckRecord>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.records.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.records.iter().filter(|r| !r.passed)
    }

    pub fn worst(&self) -> f64 {
        self.records.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    /// Per-check CSV with a leading `#` comment line.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: &str) -> Result<()> {
        writeln!(out, "# {comment}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["name", "seed", "coords", "max_rel_err", "tol", "passed"])?;
        for r in &self.records {
            w.write_record([
                r.name.clone(),
                r.seed.to_string(),
                r.coords.to_string(),
                format!("{:e}", r.max_rel_err),
                format!("{:e}", self.policy.tol),
                r.passed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

type Forward<T> = Box<dyn FnMut(&mut Tape<T>, &ParamSet<T>, &[Var]) -> Result<Var>>;

/// A differentiable function of some leaf inputs and a parameter set.
pub struct Problem<T> {
    pub inputs: Vec<Tensor<T>>,
    pub params: ParamSet<T>,
    forward: Forward<T>,
}

impl<T: Scalar> Problem<T> {
    pub fn new(
        inputs: Vec<Tensor<T>>,
        params: ParamSet<T>,
        forward: impl FnMut(&mut Tape<T>, &ParamSet<T>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self { inputs, params, forward: Box::new(forward) }
    }

    fn loss(&mut self, inputs: &[Tensor<T>], r: &Tensor<T>) -> Result<T> {
        let mut tape = Tape::new().with_finite_check(true);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = (self.forward)(&mut tape, &self.params, &vars)?;
        let loss = objective(&mut tape, y, r)?;
        tape.value(loss).item()
    }
}

fn objective<T: Scalar>(tape: &mut Tape<T>, y: Var, r: &Tensor<T>) -> Result<Var> {
    let rv = tape.leaf(r.clone());
    let ry = tape.mul(rv, y)?;
    let lin = tape.sum(ry)?;
    let sq = tape.mul(y, y)?;
    let sq = tape.sum(sq)?;
    let sq = tape.scale(sq, T::of(0.5))?;
    tape.add(lin, sq)
}

/// Tape gradient of every input coordinate followed by every parameter
/// coordinate, together with the projection `r` that defines the loss.
fn analytic<T: Scalar>(seed: u64, problem: &mut Problem<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b1e);
    let mut tape = Tape::new().with_finite_check(true);
    let vars: Vec<Var> = problem.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = (problem.forward)(&mut tape, &problem.params, &vars)?;
    let r: Vec<f64> = (0..tape.value(y).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rt = Tensor::new(tape.value(y).shape().to_vec(), r.iter().map(|&v| T::of(v)).collect())?;
    let loss = objective(&mut tape, y, &rt)?;
    problem.params.zero_grad();
    let grads = tape.backward(loss, &mut problem.params)?;

    let mut out = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        match grads.get(*v) {
            Some(g) => out.extend(g.data().iter().map(|x| x.as_f64())),
            None => out.extend(std::iter::repeat_n(0.0, problem.inputs[k].len())),
        }
    }
    let ids: Vec<_> = problem.params.ids().collect();
    for id in ids {
        out.extend(problem.params.grad(id).data().iter().map(|x| x.as_f64()));
    }
    Ok((out, r))
}

/// Central differences in the same coordinate order as [`analytic`].
fn numeric<T: Scalar>(problem: &mut Problem<T>, r: &[f64], step: f64) -> Result<Vec<f64>> {
    let h = T::of(step);
    let two_h = step * 2.0;
    let inputs = problem.inputs.clone();
    let mut out = Vec::new();
    let mut rt: Option<Tensor<T>> = None;
    let mut loss = |p: &mut Problem<T>, xs: &[Tensor<T>]| -> Result<f64> {
        if rt.is_none() {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let y = (p.forward)(&mut tape, &p.params, &vars)?;
            let shape = tape.value(y).shape().to_vec();
            rt = Some(Tensor::new(shape, r.iter().map(|&v| T::of(v)).collect())?);
        }
        Ok(p.loss(xs, rt.as_ref().expect("set above"))?.as_f64())
    };

    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let mut shifted = inputs.clone();
            let x0 = inputs[k].data()[i];
            shifted[k].data_mut()[i] = x0 + h;
            let lp = loss(problem, &shifted)?;
            shifted[k].data_mut()[i] = x0 - h;
            let lm = loss(problem, &shifted)?;
            out.push((lp - lm) / two_h);
        }
    }
    let ids: Vec<_> = problem.params.ids().collect();
    for id in ids {
        for i in 0..problem.params.value(id).len() {
            let x0 = problem.params.value(id).data()[i];
            problem.params.get_mut(id).value.data_mut()[i] = x0 + h;
            let lp = loss(problem, &inputs)?;
            problem.params.get_mut(id).value.data_mut()[i] = x0 - h;
            let lm = loss(problem, &inputs)?;
            problem.params.get_mut(id).value.data_mut()[i] = x0;
            out.push((lp - lm) / two_h);
        }
    }
    Ok(out)
}

fn record(name: &str, seed: u64, policy: &Policy, a: &[f64], n: &[f64]) -> Result<CheckRecord> {
    if a.len() != n.len() {
        return Err(Error::InvalidState(format!("{name}: {} analytic vs {} numeric coordinates", a.len(), n.len())));
    }
    let worst = a.iter().zip(n).map(|(&a, &n)| rel_err(a, n, policy.floor)).fold(0.0, f64::max);
    Ok(CheckRecord { name: name.to_string(), seed, coords: a.len(), max_rel_err: worst, passed: worst < policy.tol })
}

/// Compares tape and finite-difference gradients over every coordinate.
pub fn check<T: Scalar>(name: &str, seed: u64, policy: &Policy, problem: &mut Problem<T>) -> Result<CheckRecord> {
    let (a, r) = analytic(seed, problem)?;
    let n = numeric(problem, &r, policy.step)?;
    record(name, seed, policy, &a, &n)
}

/// Tape gradients of `problem` against central differences of
/// `reference`, the same problem built in 64-bit. Used for 32-bit checks,
/// where differences taken in 32-bit are dominated by rounding.
pub fn check_against(
    name: &str,
    seed: u64,
    policy: &Policy,
    problem: &mut Problem<f32>,
    reference: &mut Problem<f64>,
) -> Result<CheckRecord> {
    let (a, r) = analytic(seed, problem)?;
    let n = numeric(reference, &r, policy.step)?;
    record(name, seed, policy, &a, &n)
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(lo..hi)))
}

/// Values in `[0.1, 1)` with random sign, away from the kink at zero.
fn off_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        T::of(if rng.random_bool(0.5) { m } else { -m })
    })
}

fn jitter_all<T: Scalar>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, spread: f64) {
    for p in params.iter_mut() {
        for v in p.value.data_mut() {
            *v = *v + T::of(rng.random_range(-spread..spread));
        }
    }
}

fn unary<T: Scalar>(
    inputs: Vec<Tensor<T>>,
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var> + 'static,
) -> Problem<T> {
    Problem::new(inputs, ParamSet::new(), move |t, _, v| f(t, v))
}

/// Single-op problems for one seed.
pub fn op_problems<T: Scalar>(seed: u64) -> Vec<(&'static str, Problem<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out: Vec<(&'static str, Problem<T>)> = vec![
        ("add", unary(vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], |t, v| t.add(v[0], v[1]))),
        ("sub", unary(vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], |t, v| t.sub(v[0], v[1]))),
        ("mul", unary(vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)], |t, v| t.mul(v[0], v[1]))),
        ("abs", unary(vec![off_zero(r, &[2, 3])], |t, v| t.abs(v[0]))),
        ("scale", unary(vec![uniform(r, &[4], -1.0, 1.0)], |t, v| t.scale(v[0], T::of(-1.5)))),
        ("sum", unary(vec![uniform(r, &[2, 3], -1.0, 1.0)], |t, v| t.sum(v[0]))),
        ("mean", unary(vec![uniform(r, &[2, 3], -1.0, 1.0)], |t, v| t.mean(v[0]))),
        ("relu", unary(vec![off_zero(r, &[2, 3])], |t, v| t.relu(v[0]))),
        (
            "hardswish",
            unary(
                vec![Tensor::from_fn([2, 4], |i| {
                    let m = r.random_range(0.1..0.9);
                    T::of([-4.0 + m, -2.0 + m, 1.0 + m, 3.1 + m][i % 4])
                })],
                |t, v| t.hardswish(v[0]),
            ),
        ),
        (
            "pointwise_conv",
            unary(
                vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
                |t, v| t.pointwise_conv(v[0], v[1], Some(v[2])),
            ),
        ),
        (
            "conv2d",
            unary(vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0)], |t, v| {
                t.conv2d(v[0], v[1], 2, 1)
            }),
        ),
        (
            "depthwise_conv_s1",
            unary(vec![uniform(r, &[2, 3, 4, 4], -1.0, 1.0), uniform(r, &[3, 3, 3], -1.0, 1.0)], |t, v| {
                t.depthwise_conv(v[0], v[1], 1)
            }),
        ),
        (
            "depthwise_conv_s2",
            unary(vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[2, 5, 5], -1.0, 1.0)], |t, v| {
                t.depthwise_conv(v[0], v[1], 2)
            }),
        ),
        ("global_avg_pool", unary(vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)], |t, v| t.global_avg_pool(v[0]))),
        (
            "channel_conv1d",
            unary(
                vec![uniform(r, &[2, 6], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0)],
                |t, v| t.channel_conv1d(v[0], v[1], Some(v[2])),
            ),
        ),
        (
            "batch_norm_train",
            unary(
                vec![uniform(r, &[3, 2, 2, 2], -1.0, 1.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)],
                |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0),
            ),
        ),
        (
            "linear",
            unary(
                vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[2, 4], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)],
                |t, v| t.linear(v[0], v[1], Some(v[2])),
            ),
        ),
        ("softmax", unary(vec![uniform(r, &[2, 5], -2.0, 2.0)], |t, v| t.softmax(v[0]))),
        ("cross_entropy", unary(vec![uniform(r, &[3, 4], -2.0, 2.0)], |t, v| t.cross_entropy(v[0], &[0, 3, 1]))),
        ("cross_hadamard", unary(vec![uniform(r, &[2, 4, 2, 3], -1.0, 1.0)], |t, v| t.cross_hadamard(v[0]))),
        (
            "concat_channels",
            unary(vec![uniform(r, &[2, 2, 2, 2], -1.0, 1.0), uniform(r, &[2, 3, 2, 2], -1.0, 1.0)], |t, v| {
                t.concat_channels(v[0], v[1])
            }),
        ),
        (
            "gather_channels",
            unary(vec![uniform(r, &[2, 5, 2, 2], -1.0, 1.0), uniform(r, &[2, 5], 0.2, 1.2)], |t, v| {
                t.gather_channels(v[0], v[1], &[vec![0, 2, 4], vec![1, 3, 4]])
            }),
        ),
    ];
    let soft: Tensor<T> = uniform(r, &[2, 4], -1.0, 1.0);
    let soft_ref = soft.clone();
    let hard = Tensor::from_fn([2, 4], |i| T::of((i % 2) as f64));
    out.push(("straight_through", unary(vec![soft], move |t, v| t.straight_through(v[0], &hard, &soft_ref))));
    for (name, curve) in
        [("dynorm_softsign", CurveKind::Softsign), ("dynorm_sigmoid", CurveKind::Sigmoid), ("dynorm_algebraic", CurveKind::Algebraic)]
    {
        out.push((name, dynorm_problem(r, curve)));
    }
    out
}

fn dynorm_problem<T: Scalar>(rng: &mut ChaCha8Rng, curve: CurveKind) -> Problem<T> {
    unary(
        vec![
            uniform(rng, &[2, 3, 2, 2], -3.0, 3.0),
            uniform(rng, &[3], 0.5, 1.5),
            uniform(rng, &[3], -1.5, 1.5),
            uniform(rng, &[3], -0.5, 0.5),
        ],
        move |t, v| t.dynorm(v[0], v[1], v[2], v[3], curve),
    )
}

/// The full cross-Hadamard layer in training mode with its selection
/// replayed through [`SelectPath::Frozen`], so finite differences see the
/// straight-through surrogate.
pub fn ach_problem<T: Scalar>(seed: u64, n: usize, c: usize, hw: usize, c_sel: usize) -> Result<Problem<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let cfg = AchConfig::new(c, c_sel)?;
    let mut layer = AchLayer::new(&mut params, &mut rng, "ach", cfg, seed, 0)?;
    jitter_all(&mut params, &mut rng, 0.3);
    let x: Tensor<T> = uniform(&mut rng, &[n, c, hw, hw], -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    layer.forward_with(&mut tape, &params, xv, Mode::Train, SelectPath::Gumbel)?;
    let frozen = layer.freeze()?;
    Ok(Problem::new(vec![x], params, move |t, p, v| {
        Ok(layer.forward_with(t, p, v[0], Mode::Train, SelectPath::Frozen(&frozen))?.y)
    }))
}

pub fn eca_problem<T: Scalar>(seed: u64) -> Problem<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let eca = Eca::new(&mut params, &mut rng, "eca", 3);
    jitter_all(&mut params, &mut rng, 0.3);
    let x = uniform(&mut rng, &[2, 6, 3, 3], -1.0, 1.0);
    Problem::new(vec![x], params, move |t, p, v| eca.scores(t, p, v[0]))
}

pub fn ghost_problem<T: Scalar>(seed: u64) -> Result<Problem<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let cfg = GhostConfig { c_in: 3, c_out: 7, primary: 3, kernel: 3 };
    let mut ghost = GhostModule::new(&mut params, &mut rng, "ghost", cfg, false)?;
    jitter_all(&mut params, &mut rng, 0.3);
    let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    Ok(Problem::new(vec![x], params, move |t, p, v| ghost.forward(t, p, v[0], Mode::Train)))
}

pub fn dynorm_module_problem<T: Scalar>(seed: u64, curve: CurveKind) -> Problem<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let norm = DyNorm::new(&mut params, "norm", 3, curve);
    norm.jitter(&mut params, &mut rng, 0.5);
    let x = uniform(&mut rng, &[2, 3, 2, 2], -3.0, 3.0);
    Problem::new(vec![x], params, move |t, p, v| norm.forward(t, p, v[0]))
}

/// Bottleneck with either expansion; the Hada variant replays a frozen
/// selection like [`ach_problem`].
pub fn bottleneck_problem<T: Scalar>(seed: u64, expansion: Expansion) -> Result<Problem<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let spec = BottleneckSpec { c_in: 4, c_out: 4, expansion, kernel: 3, stride: 1 };
    let mut block = AdaptiveBottleneck::new(&mut params, &mut rng, "ab", spec, seed, 0)?;
    jitter_all(&mut params, &mut rng, 0.3);
    let x: Tensor<T> = uniform(&mut rng, &[3, 4, 3, 3], -1.0, 1.0);
    let frozen = match expansion {
        Expansion::Hada { .. } => {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            block.forward_with(&mut tape, &params, xv, Mode::Train, SelectPath::Gumbel)?;
            Some(block.ach().expect("hada expansion").freeze()?)
        }
        Expansion::Ghost { .. } => None,
    };
    Ok(Problem::new(vec![x], params, move |t, p, v| {
        let path = match &frozen {
            Some(f) => SelectPath::Frozen(f),
            None => SelectPath::Gumbel,
        };
        Ok(block.forward_with(t, p, v[0], Mode::Train, path)?.y)
    }))
}

fn module_problems<T: Scalar>(seed: u64) -> Result<Vec<(&'static str, Problem<T>)>> {
    Ok(vec![
        ("eca", eca_problem(seed)),
        ("dynorm_module", dynorm_module_problem(seed, CurveKind::Softsign)),
        ("ghost", ghost_problem(seed)?),
        ("ach_layer", ach_problem(seed, 2, 8, 4, 4)?),
        ("bottleneck_ghost", bottleneck_problem(seed, Expansion::Ghost { ratio: 2.0 })?),
        ("bottleneck_hada", bottleneck_problem(seed, Expansion::Hada { c_sel: 3 })?),
    ])
}

fn problems<T: Scalar>(scope: Scope, seed: u64) -> Result<Vec<(&'static str, Problem<T>)>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Op | Scope::All) {
        out.extend(op_problems::<T>(seed));
    }
    if matches!(scope, Scope::Module | Scope::All) {
        out.extend(module_problems::<T>(seed)?);
    }
    Ok(out)
}

/// Runs the suite at the requested precision.
pub fn run_suite(scope: Scope, seeds: &[u64], dtype: DType) -> Result<GradCheckReport> {
    let policy = Policy::for_dtype(dtype);
    let mut records = Vec::new();
    for &seed in seeds {
        match dtype {
            DType::F64 => {
                for (name, mut p) in problems::<f64>(scope, seed)? {
                    records.push(check(name, seed, &policy, &mut p)?);
                }
            }
            DType::F32 => {
                for ((name, mut p), (_, mut reference)) in problems::<f32>(scope, seed)?.into_iter().zip(problems::<f64>(scope, seed)?) {
                    records.push(check_against(name, seed, &policy, &mut p, &mut reference)?);
                }
            }
        }
    }
    Ok(GradCheckReport { policy, records })
}

/// Runs the DyNorm op check with a sign error injected into its backward
/// pass. A healthy checker reports this record as failed.
pub fn mutation_sentinel(seed: u64) -> Result<CheckRecord> {
    let policy = Policy::for_dtype(DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = dynorm_problem::<f64>(&mut rng, CurveKind::Softsign);
    with_dynorm_sign_fault(|| check("dynorm_sign_fault", seed, &policy, &mut p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_in_f64() {
        let report = run_suite(Scope::Op, &[1, 2], DType::F64).unwrap();
        for r in &report.records {
            assert!(r.passed, "{} seed {}: {:e}", r.name, r.seed, r.max_rel_err);
        }
    }

    #[test]
    fn modules_pass_in_f64() {
        let report = run_suite(Scope::Module, &[3], DType::F64).unwrap();
        for r in &report.records {
            assert!(r.passed, "{} seed {}: {:e}", r.name, r.seed, r.max_rel_err);
        }
    }

    #[test]
    fn sign_fault_is_detected() {
        let r = mutation_sentinel(7).unwrap();
        assert!(!r.passed, "{r:?}");
        // the fixture is scoped to the closure
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = dynorm_problem::<f64>(&mut rng, CurveKind::Softsign);
        assert!(check("dynorm", 7, &Policy::for_dtype(DType::F64), &mut p).unwrap().passed);
    }

    #[test]
    fn f32_policy_warns_and_relaxes() {
        let p = Policy::for_dtype(DType::F32);
        assert!(p.warning.is_some());
        assert_eq!(p.tol, 1e-2);
        let report = run_suite(Scope::Op, &[5], DType::F32).unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }

    #[test]
    fn scope_parses() {
        assert_eq!("module".parse::<Scope>().unwrap(), Scope::Module);
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(1.0, 1.0, REL_FLOOR_F64), 0.0);
        assert!((rel_err(2.0, 1.0, REL_FLOOR_F64) - 0.5).abs() < 1e-15);
        assert!(rel_err(0.0, 1e-9, REL_FLOOR_F64) < 1e-2);
    }
}
