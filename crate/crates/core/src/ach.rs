//! The adaptive cross-Hadamard layer, the Ghost module, and the adaptive
//! bottleneck that hosts either of them as its expansion stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{BottleneckSpec, Expansion};
use crate::autodiff::{CurveKind, ParamId, ParamSet, Tape, Var};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{fan_in_uniform, BatchNorm, DepthwiseConv, Mode, PointwiseConv};
use crate::normalization::DyNorm;
use crate::pairing::{pair_count, PairMap};
use crate::sampling::{self, GumbelStream, SelectionState};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_ECA_KERNEL: usize = 3;
/// Cheap-operation kernel used by Ghost expansions built from an
/// architecture description.
pub const GHOST_CHEAP_KERNEL: usize = 3;

/// `z: [N, Cs, H, W] -> [N, Cs(Cs-1)/2, H, W]`, channel `p` holding
/// `z_i * z_j` for the `p`-th pair.
pub fn cross_hadamard_values<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cs, h, w) = z.dims4()?;
    if cs < 2 {
        return Err(invalid_arg!("cross-Hadamard expansion needs at least 2 channels, got {cs}"));
    }
    let hw = h * w;
    let pairs = PairMap::new(cs)?;
    let zd = z.data();
    let mut out = Vec::with_capacity(n * pairs.total() * hw);
    for s in 0..n {
        for (i, j) in pairs.iter() {
            let zi = &zd[(s * cs + i) * hw..(s * cs + i + 1) * hw];
            let zj = &zd[(s * cs + j) * hw..(s * cs + j + 1) * hw];
            out.extend(zi.iter().zip(zj).map(|(&a, &b)| a * b));
        }
    }
    Tensor::new([n, pairs.total(), h, w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AchConfig {
    pub c_in: usize,
    pub c_sel: usize,
    pub eca_kernel: usize,
    pub norm: CurveKind,
    pub noise_enabled: bool,
    /// Score channels with the ECA convolution; otherwise the pooled
    /// means are the scores.
    pub eca: bool,
    /// Normalise products with batch norm instead of the dynamic curve.
    pub product_bn: bool,
}

impl AchConfig {
    pub fn new(c_in: usize, c_sel: usize) -> Result<Self> {
        let cfg = Self {
            c_in,
            c_sel,
            eca_kernel: DEFAULT_ECA_KERNEL,
            norm: CurveKind::Softsign,
            noise_enabled: true,
            eca: true,
            product_bn: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_sel < 2 || self.c_sel > self.c_in {
            return Err(Error::Config(format!(
                "selected channels {} must lie in [2, {}]",
                self.c_sel, self.c_in
            )));
        }
        if self.eca_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("ECA kernel width {} must be odd", self.eca_kernel)));
        }
        Ok(())
    }

    pub fn products(&self) -> usize {
        pair_count(self.c_sel)
    }

    pub fn out_channels(&self) -> usize {
        self.c_in + self.products()
    }
}

/// Channel scoring: global average pool followed by a 1-D convolution
/// across channels, `xi = pool(x) * w + b`.
#[derive(Clone, Debug)]
pub struct Eca {
    pub w: ParamId,
    pub b: ParamId,
}

impl Eca {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, kernel: usize) -> Self {
        Self {
            w: params.add(format!("{name}.w"), fan_in_uniform(rng, &[kernel], kernel)),
            b: params.add(format!("{name}.b"), Tensor::zeros([1])),
        }
    }

    pub fn scores<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(x)?;
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.channel_conv1d(pooled, w, Some(b))
    }
}

/// One-hot channel mapping of a single sample: `m_prime[s, c] = [c == S_s]`
/// and `m = m_prime` with each column scaled by the hard mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingMatrices<T> {
    pub m_prime: Tensor<T>,
    pub m: Tensor<T>,
}

impl<T: Scalar> MappingMatrices<T> {
    pub fn new(indices: &[usize], hard: &[T]) -> Result<Self> {
        let c = hard.len();
        let cs = indices.len();
        if indices.iter().any(|&i| i >= c) {
            return Err(invalid_arg!("selection index out of range for {c} channels"));
        }
        let mut m_prime = Tensor::zeros([cs, c]);
        let mut m = Tensor::zeros([cs, c]);
        for (s, &ch) in indices.iter().enumerate() {
            m_prime.data_mut()[s * c + ch] = T::one();
            m.data_mut()[s * c + ch] = hard[ch];
        }
        Ok(Self { m_prime, m })
    }

    /// Dense product `m . x` for one sample `x: [C, H, W]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (cs, c) = self.m.dims2()?;
        let (xc, h, w) = match x.shape() {
            &[a, b, d] => (a, b, d),
            s => return Err(invalid_arg!("expected [C, H, W], got {:?}", s)),
        };
        if xc != c {
            return Err(invalid_arg!("mapping expects {c} channels, got {xc}"));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); cs * hw];
        for s in 0..cs {
            for k in 0..c {
                let coef = self.m.data()[s * c + k];
                for t in 0..hw {
                    out[s * hw + t] = out[s * hw + t] + coef * x.data()[k * hw + t];
                }
            }
        }
        Tensor::new([cs, h, w], out)
    }
}

/// How the layer turns scores into a channel selection.
#[derive(Clone, Copy, Debug)]
pub enum SelectPath<'a, T> {
    /// Gumbel-perturbed tempered softmax, hard top-k, straight-through
    /// gradient. Noise is zero when the config disables it.
    Gumbel,
    /// Top-k of the raw scores; no noise, no softmax, no gradient to the
    /// scores.
    Deterministic,
    /// The same channels for every sample with a constant unit mask; no
    /// gradient reaches the scores.
    Fixed(&'a [usize]),
    /// Replays a recorded selection. The mask value becomes
    /// `hard + (probs - probs_recorded)`, so it equals the recorded hard
    /// mask at the recording point and its derivative is the
    /// straight-through gradient. This makes the estimator checkable with
    /// finite differences.
    Frozen(&'a FrozenSelection<T>),
}

/// Everything needed to replay a Gumbel selection.
#[derive(Clone, Debug)]
pub struct FrozenSelection<T> {
    pub noise: Tensor<T>,
    pub probs: Tensor<T>,
    pub hard: Tensor<T>,
    pub indices: Vec<Vec<usize>>,
    pub tau: f64,
}

/// Handles into the tape for one layer application.
#[derive(Clone, Copy, Debug)]
pub struct AchOutput {
    pub y: Var,
    /// Linearly transformed and batch-normalised input.
    pub features: Var,
    pub xi: Var,
    pub selected: Var,
    pub products: Var,
}

#[derive(Clone, Debug)]
pub struct AchLayer<T> {
    pub cfg: AchConfig,
    pub pointwise: PointwiseConv,
    pub bn: BatchNorm<T>,
    pub eca: Eca,
    pub norm: DyNorm,
    pub product_bn: Option<BatchNorm<T>>,
    pub selection: SelectionState<T>,
    noise: GumbelStream,
    last_noise: Option<Tensor<T>>,
}

impl<T: Scalar> AchLayer<T> {
    /// `stream` picks this layer's Gumbel stream under `seed`.
    pub fn new(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: AchConfig,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            pointwise: PointwiseConv::new(params, rng, &format!("{name}.pw"), cfg.c_in, cfg.c_in, false),
            bn: BatchNorm::new(params, &format!("{name}.bn"), cfg.c_in),
            eca: Eca::new(params, rng, &format!("{name}.eca"), cfg.eca_kernel),
            norm: DyNorm::new(params, &format!("{name}.norm"), cfg.products(), cfg.norm),
            product_bn: cfg.product_bn.then(|| BatchNorm::new(params, &format!("{name}.product_bn"), cfg.products())),
            selection: SelectionState::new(cfg.c_sel),
            noise: GumbelStream::new(seed, stream),
            last_noise: None,
            cfg,
        })
    }

    /// Training uses the Gumbel path with batch statistics; evaluation
    /// uses deterministic selection with running statistics and marks the
    /// tape as inference-only.
    pub fn forward(&mut self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var, mode: Mode) -> Result<AchOutput> {
        match mode {
            Mode::Train => self.forward_with(tape, params, x, Mode::Train, SelectPath::Gumbel),
            Mode::Eval => {
                tape.mark_inference();
                self.forward_with(tape, params, x, Mode::Eval, SelectPath::Deterministic)
            }
        }
    }

    pub fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        bn_mode: Mode,
        path: SelectPath<'_, T>,
    ) -> Result<AchOutput> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.cfg.c_in {
            return Err(invalid_arg!("layer expects {} channels, got {c}", self.cfg.c_in));
        }
        let lin = self.pointwise.forward(tape, params, x)?;
        let features = self.bn.forward(tape, params, lin, bn_mode)?;
        let xi = if self.cfg.eca {
            self.eca.scores(tape, params, features)?
        } else {
            tape.global_avg_pool(features)?
        };
        let xi_val = tape.value(xi).clone();
        let (n, _) = xi_val.dims2()?;
        let k = self.cfg.c_sel;

        let (mask, indices) = match path {
            SelectPath::Gumbel => {
                let noise = if self.cfg.noise_enabled {
                    self.noise.tensor(&[n, c])
                } else {
                    Tensor::zeros([n, c])
                };
                let probs = sampling::soft_probs(tape, xi, &noise, self.selection.tau)?;
                let (mask, hard, indices) = sampling::hard_topk_ste(tape, probs, k)?;
                self.selection.probs = tape.value(probs).clone();
                self.selection.hard = hard;
                self.last_noise = Some(noise);
                (mask, indices)
            }
            SelectPath::Deterministic => {
                let indices = xi_val
                    .data()
                    .chunks(c)
                    .map(|row| sampling::inference_select(row, k))
                    .collect::<Result<Vec<_>>>()?;
                let mut hard = Tensor::zeros([n, c]);
                for (s, sel) in indices.iter().enumerate() {
                    for &ch in sel {
                        hard.data_mut()[s * c + ch] = T::one();
                    }
                }
                self.selection.probs = Tensor::zeros([0]);
                self.selection.hard = hard.clone();
                (tape.leaf(hard), indices)
            }
            SelectPath::Fixed(sel) => {
                let mut sorted = sel.to_vec();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != k || sorted.iter().any(|&ch| ch >= c) {
                    return Err(invalid_arg!("fixed selection must name {k} distinct channels below {c}"));
                }
                let mut hard = Tensor::zeros([n, c]);
                for s in 0..n {
                    for &ch in &sorted {
                        hard.data_mut()[s * c + ch] = T::one();
                    }
                }
                self.selection.probs = Tensor::zeros([0]);
                self.selection.hard = hard;
                (tape.leaf(Tensor::ones([n, c])), vec![sorted; n])
            }
            SelectPath::Frozen(fz) => {
                if fz.noise.shape() != [n, c] || fz.indices.len() != n {
                    return Err(invalid_arg!("frozen selection recorded for a different batch shape"));
                }
                let probs = sampling::soft_probs(tape, xi, &fz.noise, fz.tau)?;
                let mask = tape.straight_through(probs, &fz.hard, &fz.probs)?;
                self.selection.probs = tape.value(probs).clone();
                self.selection.hard = fz.hard.clone();
                (mask, fz.indices.clone())
            }
        };

        let selected = tape.gather_channels(features, mask, &indices)?;
        let products = tape.cross_hadamard(selected)?;
        let normed = match self.product_bn.as_mut() {
            Some(bn) => bn.forward(tape, params, products, bn_mode)?,
            None => self.norm.forward(tape, params, products)?,
        };
        let y = tape.concat_channels(features, normed)?;
        self.selection.xi = xi_val;
        self.selection.indices = indices;
        Ok(AchOutput { y, features, xi, selected, products })
    }

    /// Snapshot of the most recent Gumbel selection.
    pub fn freeze(&self) -> Result<FrozenSelection<T>> {
        let noise = self
            .last_noise
            .clone()
            .ok_or_else(|| Error::InvalidState("no Gumbel selection has been recorded".into()))?;
        Ok(FrozenSelection {
            noise,
            probs: self.selection.probs.clone(),
            hard: self.selection.hard.clone(),
            indices: self.selection.indices.clone(),
            tau: self.selection.tau,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhostConfig {
    /// Input channels `m`.
    pub c_in: usize,
    /// Output channels `n`.
    pub c_out: usize,
    /// Primary channels `s` produced by the pointwise convolution.
    pub primary: usize,
    /// Cheap-operation kernel width.
    pub kernel: usize,
}

impl GhostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.primary == 0 || self.primary > self.c_out {
            return Err(Error::Config(format!(
                "primary channels {} must lie in [1, {}]",
                self.primary, self.c_out
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("cheap-op kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Ghost maps generated per primary channel.
    pub fn replication(&self) -> usize {
        (self.c_out - self.primary).div_ceil(self.primary)
    }

    /// Primary channel feeding ghost channel `g`.
    pub fn ghost_source(&self, g: usize) -> usize {
        g / self.replication().max(1)
    }
}

/// Pointwise convolution to `s` primary maps, then one depthwise `k x k`
/// filter per ghost map; output is primaries followed by ghosts.
#[derive(Clone, Debug)]
pub struct GhostModule<T> {
    pub cfg: GhostConfig,
    pub primary: PointwiseConv,
    pub bn_primary: BatchNorm<T>,
    pub cheap: Option<(DepthwiseConv, BatchNorm<T>)>,
    pub activation: bool,
}

impl<T: Scalar> GhostModule<T> {
    pub fn new(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: GhostConfig,
        activation: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let ghosts = cfg.c_out - cfg.primary;
        let cheap = if ghosts > 0 {
            Some((
                DepthwiseConv::new(params, rng, &format!("{name}.cheap"), ghosts, cfg.kernel, 1)?,
                BatchNorm::new(params, &format!("{name}.cheap_bn"), ghosts),
            ))
        } else {
            None
        };
        Ok(Self {
            primary: PointwiseConv::new(params, rng, &format!("{name}.primary"), cfg.c_in, cfg.primary, false),
            bn_primary: BatchNorm::new(params, &format!("{name}.primary_bn"), cfg.primary),
            cheap,
            activation,
            cfg,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var, mode: Mode) -> Result<Var> {
        let p = self.primary.forward(tape, params, x)?;
        let mut p = self.bn_primary.forward(tape, params, p, mode)?;
        if self.activation {
            p = tape.hardswish(p)?;
        }
        let Some((dw, bn)) = self.cheap.as_mut() else { return Ok(p) };
        let (n, _, _, _) = tape.value(p).dims4()?;
        let s = self.cfg.primary;
        let ghosts = self.cfg.c_out - s;
        let sources: Vec<usize> = (0..ghosts).map(|g| self.cfg.ghost_source(g)).collect();
        let ones = tape.leaf(Tensor::ones([n, s]));
        let fanned = tape.gather_channels(p, ones, &vec![sources; n])?;
        let g = dw.forward(tape, params, fanned)?;
        let mut g = bn.forward(tape, params, g, mode)?;
        if self.activation {
            g = tape.hardswish(g)?;
        }
        tape.concat_channels(p, g)
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Expander<T> {
    Ghost(GhostModule<T>),
    Hada(AchLayer<T>),
}

/// Expansion (Ghost or cross-Hadamard), depthwise `k x k` with the given
/// stride, pointwise projection, and a residual connection when shapes
/// allow it.
#[derive(Clone, Debug)]
pub struct AdaptiveBottleneck<T> {
    pub spec: BottleneckSpec,
    pub expand: Expander<T>,
    pub depthwise: DepthwiseConv,
    pub bn_depthwise: BatchNorm<T>,
    pub project: PointwiseConv,
    pub bn_project: BatchNorm<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckOutput {
    pub y: Var,
    pub expanded: Var,
    pub ach: Option<AchOutput>,
}

/// Expansion width of a bottleneck: `C + Cs(Cs-1)/2` for cross-Hadamard,
/// `round(C * ratio)` for Ghost.
pub fn expansion_width(spec: &BottleneckSpec) -> usize {
    match spec.expansion {
        Expansion::Ghost { ratio } => (spec.c_in as f64 * ratio).round() as usize,
        Expansion::Hada { c_sel } => spec.c_in + pair_count(c_sel),
    }
}

impl<T: Scalar> AdaptiveBottleneck<T> {
    pub fn new(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        spec: BottleneckSpec,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        if spec.kernel.is_multiple_of(2) || !(1..=2).contains(&spec.stride) {
            return Err(Error::Config(format!(
                "trainable bottleneck needs an odd kernel and stride 1 or 2, got k={} s={}",
                spec.kernel, spec.stride
            )));
        }
        let width = expansion_width(&spec);
        let expand = match spec.expansion {
            Expansion::Ghost { ratio } => {
                if !(ratio >= 1.0) {
                    return Err(Error::Config(format!("ghost ratio {ratio} below 1")));
                }
                let cfg = GhostConfig { c_in: spec.c_in, c_out: width, primary: (width / 2).max(1), kernel: GHOST_CHEAP_KERNEL };
                Expander::Ghost(GhostModule::new(params, rng, &format!("{name}.ghost"), cfg, true)?)
            }
            Expansion::Hada { c_sel } => {
                let cfg = AchConfig::new(spec.c_in, c_sel).map_err(|e| Error::Config(e.to_string()))?;
                Expander::Hada(AchLayer::new(params, rng, &format!("{name}.ach"), cfg, seed, stream)?)
            }
        };
        Ok(Self {
            spec,
            expand,
            depthwise: DepthwiseConv::new(params, rng, &format!("{name}.dw"), width, spec.kernel, spec.stride)?,
            bn_depthwise: BatchNorm::new(params, &format!("{name}.dw_bn"), width),
            project: PointwiseConv::new(params, rng, &format!("{name}.project"), width, spec.c_out, false),
            bn_project: BatchNorm::new(params, &format!("{name}.project_bn"), spec.c_out),
        })
    }

    pub fn has_residual(&self) -> bool {
        self.spec.stride == 1 && self.spec.c_in == self.spec.c_out
    }

    pub fn ach(&self) -> Option<&AchLayer<T>> {
        match &self.expand {
            Expander::Hada(a) => Some(a),
            Expander::Ghost(_) => None,
        }
    }

    pub fn ach_mut(&mut self) -> Option<&mut AchLayer<T>> {
        match &mut self.expand {
            Expander::Hada(a) => Some(a),
            Expander::Ghost(_) => None,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var, mode: Mode) -> Result<BottleneckOutput> {
        let path = match mode {
            Mode::Train => SelectPath::Gumbel,
            Mode::Eval => {
                tape.mark_inference();
                SelectPath::Deterministic
            }
        };
        self.forward_with(tape, params, x, mode, path)
    }

    pub fn forward_with(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Var,
        mode: Mode,
        path: SelectPath<'_, T>,
    ) -> Result<BottleneckOutput> {
        let (expanded, ach) = match &mut self.expand {
            Expander::Ghost(g) => (g.forward(tape, params, x, mode)?, None),
            Expander::Hada(a) => {
                let out = a.forward_with(tape, params, x, mode, path)?;
                (out.y, Some(out))
            }
        };
        let h = self.depthwise.forward(tape, params, expanded)?;
        let h = self.bn_depthwise.forward(tape, params, h, mode)?;
        let h = tape.hardswish(h)?;
        let h = self.project.forward(tape, params, h)?;
        let mut y = self.bn_project.forward(tape, params, h, mode)?;
        if self.has_residual() {
            y = tape.add(y, x)?;
        }
        Ok(BottleneckOutput { y, expanded, ach })
    }
}

/// Fresh generator for layer construction.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn layer(c: usize, cs: usize, seed: u64) -> (ParamSet<f64>, AchLayer<f64>, ChaCha8Rng) {
        let mut rng = init_rng(seed);
        let mut params = ParamSet::new();
        let l = AchLayer::new(&mut params, &mut rng, "ach", AchConfig::new(c, cs).unwrap(), seed, 0).unwrap();
        (params, l, rng)
    }

    #[test]
    fn expansion_matches_double_loop() {
        let mut rng = init_rng(1);
        let z = random(&mut rng, &[2, 5, 3, 2]);
        let out = cross_hadamard_values(&z).unwrap();
        assert_eq!(out.shape(), &[2, 10, 3, 2]);
        for n in 0..2 {
            let mut p = 0;
            for i in 0..5 {
                for j in i + 1..5 {
                    let want: Vec<f64> = z.plane(n, i).iter().zip(z.plane(n, j)).map(|(a, b)| a * b).collect();
                    assert_eq!(out.plane(n, p), &want[..]);
                    p += 1;
                }
            }
        }
        assert_eq!(cross_hadamard_values(&Tensor::<f64>::zeros([1, 16, 1, 1])).unwrap().shape()[1], 120);
        assert!(matches!(cross_hadamard_values(&Tensor::<f64>::zeros([1, 1, 2, 2])), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn output_channel_law() {
        for (c, cs, want) in [(96, 16, 216), (128, 32, 624), (8, 2, 9)] {
            let (params, mut l, mut rng) = layer(c, cs, 3);
            assert_eq!(l.cfg.out_channels(), want);
            let mut tape = Tape::new();
            let x = tape.leaf(random(&mut rng, &[2, c, 1, 1]));
            let out = l.forward(&mut tape, &params, x, Mode::Train).unwrap();
            assert_eq!(tape.value(out.y).shape(), &[2, want, 1, 1]);
        }
        assert!(matches!(AchConfig::new(4, 5), Err(Error::Config(_))));
        assert!(AchConfig::new(4, 1).is_err());
    }

    #[test]
    fn selection_feeds_mapped_channels() {
        let (params, mut l, mut rng) = layer(6, 3, 4);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[2, 6, 2, 2]));
        let out = l.forward(&mut tape, &params, x, Mode::Train).unwrap();
        let feats = tape.value(out.features);
        let sel = tape.value(out.selected);
        for n in 0..2 {
            let hard = &l.selection.hard.data()[n * 6..(n + 1) * 6];
            let mm = MappingMatrices::new(&l.selection.indices[n], hard).unwrap();
            for row in mm.m_prime.data().chunks(6) {
                assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            }
            let sample = Tensor::new([6, 2, 2], feats.data()[n * 24..(n + 1) * 24].to_vec()).unwrap();
            let dense = mm.apply(&sample).unwrap();
            assert_eq!(dense.data(), &sel.data()[n * 12..(n + 1) * 12]);
        }
    }

    #[test]
    fn eval_is_deterministic_and_refuses_backward() {
        let (params, mut l, mut rng) = layer(6, 3, 5);
        let x = random(&mut rng, &[2, 6, 3, 3]);
        let run = |l: &mut AchLayer<f64>| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = l.forward(&mut tape, &params, xv, Mode::Eval).unwrap();
            (tape.value(out.y).clone(), tape, out.y)
        };
        let (a, _, _) = run(&mut l);
        let (b, mut tape, y) = run(&mut l);
        assert_eq!(a, b);
        let loss = tape.sum(y).unwrap();
        let mut p = params.clone();
        assert!(matches!(tape.backward(loss, &mut p), Err(Error::InvalidState(_))));
    }

    #[test]
    fn noiseless_train_selection_equals_eval_selection() {
        let (params, mut l, mut rng) = layer(8, 4, 6);
        l.cfg.noise_enabled = false;
        let x = random(&mut rng, &[2, 8, 3, 3]);
        let mut t1 = Tape::new();
        let v1 = t1.leaf(x.clone());
        let a = l.forward_with(&mut t1, &params, v1, Mode::Eval, SelectPath::Gumbel).unwrap();
        let mut t2 = Tape::new();
        let v2 = t2.leaf(x);
        let b = l.forward(&mut t2, &params, v2, Mode::Eval).unwrap();
        assert_eq!(t1.value(a.y), t2.value(b.y));
    }

    #[test]
    fn stream_seed_changes_selection_not_shape() {
        let mut rng = init_rng(7);
        let x = random(&mut rng, &[4, 8, 2, 2]);
        let mut shapes = Vec::new();
        let mut picks = Vec::new();
        for stream in 0..6 {
            let mut r = init_rng(9);
            let mut params = ParamSet::new();
            let mut l = AchLayer::new(&mut params, &mut r, "ach", AchConfig::new(8, 3).unwrap(), 11, stream).unwrap();
            l.selection.tau = 4.0;
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = l.forward(&mut tape, &params, xv, Mode::Train).unwrap();
            shapes.push(tape.value(out.y).shape().to_vec());
            picks.push(l.selection.indices.clone());
        }
        assert!(shapes.windows(2).all(|w| w[0] == w[1]));
        assert!(picks.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn eca_delta_kernel_gives_channel_means() {
        let mut rng = init_rng(8);
        let mut params = ParamSet::<f64>::new();
        let eca = Eca::new(&mut params, &mut rng, "eca", 3);
        params.get_mut(eca.w).value = Tensor::new([3], vec![0.0, 1.0, 0.0]).unwrap();
        let x = random(&mut rng, &[2, 4, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let s = eca.scores(&mut tape, &params, xv).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                let mean = x.plane(n, c).iter().sum::<f64>() / 9.0;
                assert!((tape.value(s).data()[n * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_gradient_reaches_eca() {
        let (mut params, mut l, mut rng) = layer(8, 4, 10);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[2, 8, 3, 3]));
        let out = l.forward(&mut tape, &params, x, Mode::Train).unwrap();
        let sq = tape.mul(out.y, out.y).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert!(params.grad(l.eca.w).max_abs() > 0.0);
        assert!(params.grad(l.pointwise.weight).max_abs() > 0.0);
        assert!(params.grad(l.norm.alpha).max_abs() > 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (mut params, mut l, mut rng) = layer(6, 3, 12);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[2, 6, 2, 2]));
        let out = l.forward(&mut tape, &params, x, Mode::Train).unwrap();
        let z = tape.scale(out.y, 0.0).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward(loss, &mut params).unwrap();
        for (_, p) in params.iter() {
            assert_eq!(p.grad.max_abs(), 0.0, "{}", p.name);
        }
    }

    #[test]
    fn full_selection_recovers_all_pairs() {
        let (params, mut l, mut rng) = layer(5, 5, 13);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[2, 5, 2, 2]));
        let out = l.forward(&mut tape, &params, x, Mode::Train).unwrap();
        assert_eq!(tape.value(out.y).shape()[1], 5 * 6 / 2);
        let brute = cross_hadamard_values(tape.value(out.features)).unwrap();
        assert_eq!(tape.value(out.products), &brute);
    }

    #[test]
    fn ghost_counts_and_sources() {
        let cfg = GhostConfig { c_in: 64, c_out: 128, primary: 64, kernel: 3 };
        assert_eq!(cfg.replication(), 1);
        assert_eq!(cfg.ghost_source(63), 63);
        let cfg = GhostConfig { c_in: 4, c_out: 10, primary: 3, kernel: 3 };
        assert_eq!(cfg.replication(), 3);
        assert_eq!((0..7).map(|g| cfg.ghost_source(g)).collect::<Vec<_>>(), [0, 0, 0, 1, 1, 1, 2]);
        assert!(GhostConfig { c_in: 4, c_out: 4, primary: 5, kernel: 3 }.validate().is_err());
        assert!(GhostConfig { c_in: 4, c_out: 4, primary: 2, kernel: 2 }.validate().is_err());

        let mut rng = init_rng(14);
        let mut params = ParamSet::<f64>::new();
        let mut g = GhostModule::new(&mut params, &mut rng, "g", cfg, false).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[2, 4, 3, 3]));
        let y = g.forward(&mut tape, &params, x, Mode::Train).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 10, 3, 3]);
    }

    #[test]
    fn degenerate_ghost_is_pointwise() {
        let mut rng = init_rng(15);
        let mut params = ParamSet::<f64>::new();
        let cfg = GhostConfig { c_in: 3, c_out: 5, primary: 5, kernel: 3 };
        let mut g = GhostModule::new(&mut params, &mut rng, "g", cfg, false).unwrap();
        assert!(g.cheap.is_none());
        let x = random(&mut rng, &[2, 3, 2, 2]);
        let mut t1 = Tape::new();
        let xv = t1.leaf(x.clone());
        let y = g.forward(&mut t1, &params, xv, Mode::Train).unwrap();
        let mut t2 = Tape::new();
        let xv = t2.leaf(x);
        let p = g.primary.forward(&mut t2, &params, xv).unwrap();
        let p = g.bn_primary.forward(&mut t2, &params, p, Mode::Train).unwrap();
        assert_eq!(t1.value(y), t2.value(p));
    }

    #[test]
    fn bottleneck_residual_width_and_stride() {
        let mut rng = init_rng(16);
        let mut params = ParamSet::<f64>::new();
        let spec = BottleneckSpec { c_in: 6, c_out: 6, expansion: Expansion::Hada { c_sel: 3 }, kernel: 3, stride: 1 };
        let mut b = AdaptiveBottleneck::new(&mut params, &mut rng, "ab", spec, 1, 0).unwrap();
        params.get_mut(b.project.weight).value = Tensor::zeros([6, 9]);
        let x = random(&mut rng, &[2, 6, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = b.forward(&mut tape, &params, xv, Mode::Train).unwrap();
        assert_eq!(tape.value(out.expanded).shape()[1], 9);
        assert_eq!(tape.value(out.y), &x);

        let big = BottleneckSpec { c_in: 96, c_out: 96, expansion: Expansion::Hada { c_sel: 16 }, kernel: 5, stride: 1 };
        assert_eq!(expansion_width(&big), 216);

        let spec = BottleneckSpec { c_in: 4, c_out: 8, expansion: Expansion::Ghost { ratio: 2.0 }, kernel: 3, stride: 2 };
        let mut b = AdaptiveBottleneck::new(&mut params, &mut rng, "ab2", spec, 1, 1).unwrap();
        assert!(!b.has_residual());
        let mut tape = Tape::new();
        let xv = tape.leaf(random(&mut rng, &[2, 4, 5, 5]));
        let out = b.forward(&mut tape, &params, xv, Mode::Train).unwrap();
        assert_eq!(tape.value(out.y).shape(), &[2, 8, 3, 3]);

        let bad = BottleneckSpec { c_in: 4, c_out: 4, expansion: Expansion::Hada { c_sel: 9 }, kernel: 3, stride: 1 };
        assert!(matches!(AdaptiveBottleneck::<f64>::new(&mut params, &mut rng, "x", bad, 1, 2), Err(Error::Config(_))));
        let bad = BottleneckSpec { kernel: 2, ..spec };
        assert!(matches!(AdaptiveBottleneck::<f64>::new(&mut params, &mut rng, "y", bad, 1, 3), Err(Error::Config(_))));
    }
}
