//! Desk-scale training demo. Class labels depend only on the product of
//! two latent channels, so a network has to select that pair to solve the
//! task well.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ach::{AchOutput, AdaptiveBottleneck, SelectPath};
use crate::arch::{BottleneckSpec, Expansion};
use crate::autodiff::{ParamSet, Tape};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{Linear, Mode, Sgd};
use crate::sampling::{anneal_tau, AnnealKind, AnnealSchedule, TAU_MAX, TAU_MIN};
use crate::tensor::{Scalar, Tensor};

pub const CLASSES: usize = 4;
pub const TARGET_ACCURACY: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub samples: usize,
    /// Latent channels; two of them are informative.
    pub channels: usize,
    pub side: usize,
    /// Standard deviation of the per-pixel noise.
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { samples: 512, channels: 8, side: 8, noise: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct DemoDataset<T> {
    /// `[N, C, S, S]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// The two latent channels whose product sets the class.
    pub informative: [usize; 2],
    /// `|a b|` above this value sets the low label bit.
    pub threshold: f64,
    pub seed: u64,
}

/// Zero-mean pattern with unit mean square: `2 cos(2 pi x / S) cos(2 pi y / S)`.
fn pattern(side: usize) -> Vec<f64> {
    let w = std::f64::consts::TAU / side as f64;
    (0..side * side).map(|i| 2.0 * (w * (i / side) as f64).cos() * (w * (i % side) as f64).cos()).collect()
}

impl<T: Scalar> DemoDataset<T> {
    /// Every channel carries `z_c * P + noise` with `z_c ~ N(0, 1)`, so
    /// channel statistics do not reveal which pair matters. The class is
    /// `2 [ab > 0] + [|ab| > median |ab|]`.
    pub fn generate(cfg: &DatasetConfig, seed: u64) -> Result<Self> {
        if cfg.channels < 2 || cfg.side < 3 || cfg.samples < CLASSES {
            return Err(invalid_arg!("dataset needs >= 2 channels, side >= 3 and >= {CLASSES} samples"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chans: Vec<usize> = (0..cfg.channels).collect();
        chans.shuffle(&mut rng);
        let mut informative = [chans[0], chans[1]];
        informative.sort_unstable();

        let p = pattern(cfg.side);
        let plane = p.len();
        let mut data = Vec::with_capacity(cfg.samples * cfg.channels * plane);
        let mut products = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let z: Vec<f64> = (0..cfg.channels).map(|_| rng.sample(StandardNormal)).collect();
            products.push(z[informative[0]] * z[informative[1]]);
            for &zc in &z {
                for &pv in &p {
                    let eps: f64 = rng.sample(StandardNormal);
                    data.push(T::of(zc * pv + cfg.noise * eps));
                }
            }
        }
        let mut mags: Vec<f64> = products.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let threshold = mags[mags.len() / 2];
        let labels = products.iter().map(|&v| 2 * usize::from(v > 0.0) + usize::from(v.abs() > threshold)).collect();
        Ok(Self {
            images: Tensor::new([cfg.samples, cfg.channels, cfg.side, cfg.side], data)?,
            labels,
            informative,
            threshold,
            seed,
        })
    }

    /// Wraps externally loaded images; `informative` is unknown and set to
    /// the first two channels.
    pub fn from_parts(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let (n, c, _, _) = images.dims4()?;
        if labels.len() != n || c < 2 {
            return Err(invalid_arg!("need one label per image and at least 2 channels"));
        }
        Ok(Self { images, labels, informative: [0, 1], threshold: f64::NAN, seed: 0 })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let t = Tensor::new([idx.len(), s[1], s[2], s[3]], data).expect("batch shape");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Learnable,
    /// A random channel subset per block, fixed for the whole run.
    FixedRandom,
    /// Pooled means instead of the ECA convolution as scores.
    NoEca,
    /// Batch norm instead of the dynamic curve on products.
    BatchNormProducts,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Learnable, Variant::FixedRandom, Variant::NoEca, Variant::BatchNormProducts];
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(Variant::Learnable),
            "fixed-random" => Ok(Variant::FixedRandom),
            "no-eca" => Ok(Variant::NoEca),
            "batch-norm-products" => Ok(Variant::BatchNormProducts),
            _ => Err(invalid_arg!("unknown variant `{s}`")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Learnable => "learnable",
            Variant::FixedRandom => "fixed-random",
            Variant::NoEca => "no-eca",
            Variant::BatchNormProducts => "batch-norm-products",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauControl {
    /// Gradient-norm tracking, updated once per epoch.
    Adaptive,
    Anneal(AnnealKind),
}

impl FromStr for TauControl {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(TauControl::Adaptive),
            other => Ok(TauControl::Anneal(other.parse()?)),
        }
    }
}

/// Annealing runs from this value down to [`ANNEAL_TAU_END`].
pub const ANNEAL_TAU_START: f64 = 2.0;
pub const ANNEAL_TAU_END: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: TauControl,
    pub c_sel: usize,
    pub variant: Variant,
    pub data: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            tau: TauControl::Adaptive,
            c_sel: 4,
            variant: Variant::Learnable,
            data: DatasetConfig::default(),
        }
    }
}

/// Cross-Hadamard bottleneck on the raw latents, then a Ghost bottleneck,
/// global pooling and a linear head. The first pointwise conv starts as the
/// identity so selected channels map back to latents.
pub struct DemoNet<T> {
    pub params: ParamSet<T>,
    pub blocks: Vec<AdaptiveBottleneck<T>>,
    pub head: Linear,
    /// Per block: the fixed subset for [`Variant::FixedRandom`].
    pub fixed: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> DemoNet<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let c = cfg.data.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
        let mut params = ParamSet::new();
        let hada = BottleneckSpec { c_in: c, c_out: c, expansion: Expansion::Hada { c_sel: cfg.c_sel }, kernel: 3, stride: 1 };
        let ghost = BottleneckSpec { expansion: Expansion::Ghost { ratio: 2.0 }, ..hada };
        let mut blocks = Vec::new();
        for (i, spec) in [hada, ghost].into_iter().enumerate() {
            let mut b = AdaptiveBottleneck::new(&mut params, &mut rng, &format!("block{i}"), spec, cfg.seed, i as u64)?;
            if let Some(ach) = b.ach_mut() {
                ach.cfg.eca = cfg.variant != Variant::NoEca;
                if cfg.variant == Variant::BatchNormProducts {
                    ach.cfg.product_bn = true;
                    ach.product_bn = Some(crate::nn::BatchNorm::new(&mut params, &format!("block{i}.product_bn"), ach.cfg.products()));
                }
                params.get_mut(ach.pointwise.weight).value = Tensor::from_fn([c, c], |k| T::of(f64::from(u8::from(k / c == k % c))));
            }
            blocks.push(b);
        }
        let fixed = blocks
            .iter()
            .map(|b| {
                (cfg.variant == Variant::FixedRandom && b.ach().is_some()).then(|| {
                    let mut all: Vec<usize> = (0..c).collect();
                    all.shuffle(&mut rng);
                    all.truncate(cfg.c_sel);
                    all.sort_unstable();
                    all
                })
            })
            .collect();
        let head = Linear::new(&mut params, &mut rng, "head", c, CLASSES);
        Ok(Self { params, blocks, head, fixed })
    }

    /// Logits and the selection outputs of each cross-Hadamard block.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<(crate::autodiff::Var, Vec<AchOutput>)> {
        if mode == Mode::Eval {
            tape.mark_inference();
        }
        let mut h = tape.leaf(x.clone());
        let mut achs = Vec::new();
        for (b, fixed) in self.blocks.iter_mut().zip(&self.fixed) {
            let path = match (fixed, mode) {
                (Some(sel), _) => SelectPath::Fixed(sel),
                (None, Mode::Train) => SelectPath::Gumbel,
                (None, Mode::Eval) => SelectPath::Deterministic,
            };
            let out = b.forward_with(tape, &self.params, h, mode, path)?;
            achs.extend(out.ach);
            h = out.y;
        }
        let pooled = tape.global_avg_pool(h)?;
        Ok((self.head.forward(tape, &self.params, pooled)?, achs))
    }

    pub fn taus(&self) -> Vec<f64> {
        self.blocks.iter().filter_map(|b| b.ach().map(|a| a.selection.tau)).collect()
    }

    /// Input latent driving each post-transform channel of the first
    /// block: the largest-magnitude weight of its pointwise row.
    pub fn attribution(&self) -> Vec<usize> {
        let ach = self.blocks[0].ach().expect("first block is cross-Hadamard");
        let w = self.params.value(ach.pointwise.weight);
        let c = ach.cfg.c_in;
        w.data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if v.abs() > row[best].abs() {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    /// Temperature of each cross-Hadamard block after the epoch.
    pub taus: Vec<f64>,
    /// Fraction of samples whose first-block selection contains both
    /// informative latents.
    pub informative_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRun {
    pub config: RunConfig,
    pub informative: [usize; 2],
    pub epochs: Vec<EpochMetrics>,
    /// Per cross-Hadamard block, selection counts per channel over the
    /// final evaluation pass.
    pub histogram: Vec<Vec<usize>>,
    pub elapsed_s: f64,
}

impl DemoRun {
    pub fn final_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_acc)
    }

    /// First epoch (1-based) reaching `target` accuracy.
    pub fn epochs_to(&self, target: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.train_acc >= target).map(|e| e.epoch)
    }

    /// Both informative latents selected for at least half the samples in
    /// the final epoch.
    pub fn informative_selected(&self) -> bool {
        self.epochs.last().is_some_and(|e| e.informative_frac >= 0.5)
    }

    pub fn all_taus(&self) -> impl Iterator<Item = f64> + '_ {
        self.epochs.iter().flat_map(|e| e.taus.iter().copied())
    }

    pub fn write_metrics_csv<W: Write>(&self, mut out: W, comment: &str) -> Result<()> {
        writeln!(out, "# {comment}")?;
        let mut w = csv::Writer::from_writer(out);
        let blocks = self.epochs.first().map_or(0, |e| e.taus.len());
        let mut header = vec!["epoch".to_string(), "loss".into(), "train_acc".into(), "informative_frac".into()];
        header.extend((0..blocks).map(|b| format!("tau_{b}")));
        w.write_record(&header)?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), format!("{:.6}", e.loss), format!("{:.6}", e.train_acc), format!("{:.4}", e.informative_frac)];
            row.extend(e.taus.iter().map(|t| format!("{t:.6}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, mut out: W, comment: &str) -> Result<()> {
        writeln!(out, "# {comment}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["block", "channel", "count"])?;
        for (b, counts) in self.histogram.iter().enumerate() {
            for (c, n) in counts.iter().enumerate() {
                w.write_record([b.to_string(), c.to_string(), n.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct EvalStats {
    acc: f64,
    informative_frac: f64,
    histogram: Vec<Vec<usize>>,
}

fn evaluate<T: Scalar>(net: &mut DemoNet<T>, data: &DemoDataset<T>, batch: usize) -> Result<EvalStats> {
    let c = data.images.shape()[1];
    let owner = net.attribution();
    let mut correct = 0;
    let mut both = 0;
    let mut histogram: Vec<Vec<usize>> = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let (logits, achs) = net.forward(&mut tape, &x, Mode::Eval)?;
        let l = tape.value(logits);
        for (row, &y) in l.data().chunks(CLASSES).zip(&labels) {
            let pred = (0..CLASSES).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            correct += usize::from(pred == y);
        }
        histogram.resize(achs.len(), vec![0; c]);
        let mut block = 0;
        for b in &net.blocks {
            let Some(ach) = b.ach() else { continue };
            for sel in &ach.selection.indices {
                for &ch in sel {
                    histogram[block][ch] += 1;
                }
                if block == 0 {
                    let latents: Vec<usize> = sel.iter().map(|&ch| owner[ch]).collect();
                    both += usize::from(data.informative.iter().all(|i| latents.contains(i)));
                }
            }
            block += 1;
        }
    }
    let n = data.len() as f64;
    Ok(EvalStats { acc: correct as f64 / n, informative_frac: both as f64 / n, histogram })
}

/// Trains one configuration from scratch.
pub fn train<T: Scalar>(cfg: &RunConfig) -> Result<DemoRun> {
    if cfg.epochs == 0 || cfg.batch < 2 {
        return Err(invalid_arg!("need at least one epoch and a batch of at least 2"));
    }
    let t0 = Instant::now();
    let data = DemoDataset::<T>::generate(&cfg.data, cfg.seed)?;
    let mut net = DemoNet::<T>::new(cfg)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(7));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut histogram = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut xi_sq: Vec<f64> = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = data.batch(chunk);
            let mut tape = Tape::new();
            let (logits, achs) = net.forward(&mut tape, &x, Mode::Train)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).item()?.as_f64();
            if !lv.is_finite() {
                return Err(Error::InvalidState(format!(
                    "training diverged at epoch {epoch}, batch {bi}: loss {lv}, temperatures {:?}, lr {}",
                    net.taus(),
                    cfg.lr
                )));
            }
            net.params.zero_grad();
            let grads = tape.backward(loss, &mut net.params)?;
            xi_sq.resize(achs.len(), 0.0);
            for (acc, out) in xi_sq.iter_mut().zip(&achs) {
                if let Some(g) = grads.get(out.xi) {
                    *acc += g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
                }
            }
            opt.step(&mut net.params);
            loss_sum += lv;
            batches += 1;
        }

        let mut block = 0;
        for b in net.blocks.iter_mut() {
            let Some(ach) = b.ach_mut() else { continue };
            match cfg.tau {
                TauControl::Adaptive => {
                    let norm = xi_sq.get(block).map(|s| s.sqrt()).filter(|n| *n > 0.0);
                    ach.selection.adjust_tau(norm);
                }
                TauControl::Anneal(kind) => {
                    let sched =
                        AnnealSchedule { kind, tau_max: ANNEAL_TAU_START, tau_min: ANNEAL_TAU_END, epochs: cfg.epochs };
                    ach.selection.tau = anneal_tau(epoch, &sched)?.clamp(TAU_MIN, TAU_MAX);
                }
            }
            block += 1;
        }

        let stats = evaluate(&mut net, &data, 128)?;
        histogram = stats.histogram;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            train_acc: stats.acc,
            taus: net.taus(),
            informative_frac: stats.informative_frac,
        };
        log::debug!("epoch {epoch}: loss {:.4} acc {:.4} taus {:?}", m.loss, m.train_acc, m.taus);
        epochs.push(m);
    }

    Ok(DemoRun {
        config: cfg.clone(),
        informative: data.informative,
        epochs,
        histogram,
        elapsed_s: t0.elapsed().as_secs_f64(),
    })
}

/// The same seed under every ablation variant.
pub fn run_ablations<T: Scalar>(base: &RunConfig) -> Result<Vec<DemoRun>> {
    Variant::ALL.iter().map(|&variant| train::<T>(&RunConfig { variant, ..base.clone() })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_balanced_and_deterministic() {
        let cfg = DatasetConfig { samples: 400, ..Default::default() };
        let a = DemoDataset::<f64>::generate(&cfg, 3).unwrap();
        let b = DemoDataset::<f64>::generate(&cfg, 3).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.informative[0], a.informative[1]);
        for k in 0..CLASSES {
            let n = a.labels.iter().filter(|&&l| l == k).count();
            assert!((60..=140).contains(&n), "class {k}: {n}");
        }
    }

    #[test]
    fn pattern_has_zero_mean_and_unit_power() {
        let p = pattern(16);
        assert!(p.iter().sum::<f64>().abs() < 1e-12);
        assert!((p.iter().map(|v| v * v).sum::<f64>() / 256.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variants_and_tau_modes_parse() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("cosine".parse::<TauControl>().unwrap(), TauControl::Anneal(AnnealKind::Cosine));
        assert!("warm".parse::<TauControl>().is_err());
    }

    #[test]
    fn short_run_records_metrics() {
        let cfg = RunConfig {
            epochs: 2,
            data: DatasetConfig { samples: 64, side: 6, ..Default::default() },
            ..Default::default()
        };
        let run = train::<f64>(&cfg).unwrap();
        assert_eq!(run.epochs.len(), 2);
        assert_eq!(run.histogram.len(), 1);
        assert!(run.all_taus().all(|t| (TAU_MIN..=TAU_MAX).contains(&t)));
        let mut buf = Vec::new();
        run.write_metrics_csv(&mut buf, "m").unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("tau_0"));
    }
}
