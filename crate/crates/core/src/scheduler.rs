//! Cross-Hadamard expansion under three dispatch strategies on a scoped
//! worker pool, plus timing sweeps and the normalised-difference heatmap.
//!
//! Logical blocks are multiplexed onto OS threads. Every output channel
//! plane is owned by exactly one worker, so results never depend on the
//! schedule.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::thread;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ach::cross_hadamard_values;
use crate::error::{invalid_arg, Error, Result};
use crate::pairing::{index_from_pair, pair_count, parity_blocks};
use crate::tensor::{Scalar, Tensor};

/// Added to the heatmap denominator, in seconds.
pub const HEATMAP_EPS: f64 = 1e-9;
/// Written under the heatmap's tool line.
pub const HEATMAP_CAVEAT: &str =
    "CPU thread-pool timings: positive means parity-balanced was faster; cache effects on accelerators differ";
pub const DEFAULT_WARMUPS: usize = 2;
pub const MIN_REPEATS: usize = 5;
/// Largest output (in elements) a benchmark cell may allocate.
pub const DEFAULT_MAX_ELEMENTS: usize = 1 << 26;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Serial reference: one worker, pairs in index order.
    Naive,
    /// One logical block per pair, blocks dealt round-robin to workers.
    Direct,
    /// One logical block per channel holding its parity-balanced pairs.
    Parity,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Naive, Strategy::Direct, Strategy::Parity];
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "naive" => Ok(Strategy::Naive),
            "direct" => Ok(Strategy::Direct),
            "parity" => Ok(Strategy::Parity),
            other => Err(invalid_arg!("unknown strategy `{other}`")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Naive => "naive",
            Strategy::Direct => "direct",
            Strategy::Parity => "parity",
        })
    }
}

/// Hardware parallelism, or 1 when unknown.
pub fn default_workers() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub strategy: Strategy,
    pub workers: usize,
    pub c_sel: usize,
    /// Pair indices per worker, in execution order.
    pub assignments: Vec<Vec<usize>>,
}

impl DispatchPlan {
    pub fn new(strategy: Strategy, workers: usize, c_sel: usize) -> Result<Self> {
        if workers == 0 {
            return Err(invalid_arg!("worker count must be positive"));
        }
        if c_sel < 2 {
            return Err(invalid_arg!("dispatch needs at least 2 channels, got {c_sel}"));
        }
        let total = pair_count(c_sel);
        let assignments = match strategy {
            Strategy::Naive => vec![(0..total).collect()],
            Strategy::Direct => {
                let n = workers.min(total);
                let mut a = vec![Vec::new(); n];
                for p in 0..total {
                    a[p % n].push(p);
                }
                a
            }
            Strategy::Parity => {
                let mut a = vec![Vec::new(); workers.min(c_sel)];
                let n = a.len();
                for block in parity_blocks(c_sel)? {
                    let w = &mut a[block.block_id % n];
                    for (i, j) in block.pairs {
                        w.push(index_from_pair(i, j, c_sel)?);
                    }
                }
                a
            }
        };
        Ok(Self { strategy, workers, c_sel, assignments })
    }

    /// True when every pair index appears in exactly one list.
    pub fn is_partition(&self) -> bool {
        let total = pair_count(self.c_sel);
        let mut seen = vec![false; total];
        for &p in self.assignments.iter().flatten() {
            if p >= total || std::mem::replace(&mut seen[p], true) {
                return false;
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Cross-Hadamard expansion of `z: [N, Cs, H, W]` executed per `plan`.
pub fn run_dispatch<T: Scalar>(z: &Tensor<T>, plan: &DispatchPlan) -> Result<Tensor<T>> {
    let (n, cs, h, w) = z.dims4()?;
    if cs != plan.c_sel {
        return Err(invalid_arg!("plan built for {} channels, input has {cs}", plan.c_sel));
    }
    let hw = h * w;
    let total = pair_count(cs);
    let mut out = vec![T::zero(); n * total * hw];
    if hw == 0 || n == 0 {
        return Tensor::new([n, total, h, w], out);
    }

    let mut planes: Vec<Option<&mut [T]>> = out.chunks_mut(hw).map(Some).collect();
    let mut jobs: Vec<Vec<(usize, usize, &mut [T])>> = Vec::with_capacity(plan.assignments.len());
    for list in &plan.assignments {
        let mut job = Vec::with_capacity(list.len() * n);
        for &p in list {
            for s in 0..n {
                let dst = planes[s * total + p].take().ok_or_else(|| invalid_arg!("pair {p} assigned twice"))?;
                job.push((s, p, dst));
            }
        }
        jobs.push(job);
    }
    if planes.iter().any(Option::is_some) {
        return Err(invalid_arg!("plan does not cover every pair"));
    }

    let pairs: Vec<(usize, usize)> = crate::pairing::PairMap::new(cs)?.iter().collect();
    let zd = z.data();
    let work = |job: Vec<(usize, usize, &mut [T])>| {
        for (s, p, dst) in job {
            let (i, j) = pairs[p];
            let zi = &zd[(s * cs + i) * hw..(s * cs + i + 1) * hw];
            let zj = &zd[(s * cs + j) * hw..(s * cs + j + 1) * hw];
            for ((o, &a), &b) in dst.iter_mut().zip(zi).zip(zj) {
                *o = a * b;
            }
        }
    };
    let mut jobs = jobs.into_iter();
    let first = jobs.next();
    thread::scope(|scope| {
        for job in jobs {
            scope.spawn(move || work(job));
        }
        if let Some(job) = first {
            work(job);
        }
    });
    drop(planes);
    Tensor::new([n, total, h, w], out)
}

/// Hex SHA-256 of the little-endian `f64` bit patterns of `t`.
pub fn checksum<T: Scalar>(t: &Tensor<T>) -> String {
    let mut hasher = Sha256::new();
    for s in t.shape() {
        hasher.update((*s as u64).to_le_bytes());
    }
    for v in t.data() {
        hasher.update(v.as_f64().to_bits().to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `(a - b) / (a + b + eps)`; positive when `a` is slower.
pub fn normalized_difference(a: f64, b: f64) -> f64 {
    (a - b) / (a + b + HEATMAP_EPS)
}

/// Parses `1,8`, `16..256` (doubling from the start, end always included)
/// or a single value.
pub fn parse_range(s: &str) -> Result<Vec<usize>> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| invalid_arg!("bad grid value `{t}`"));
    let mut out = Vec::new();
    for part in s.split(',') {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b) = (num(a)?, num(b)?);
            if a == 0 || a > b {
                return Err(invalid_arg!("bad grid range `{part}`"));
            }
            let mut v = a;
            while v < b {
                out.push(v);
                v *= 2;
            }
            out.push(b);
        } else {
            out.push(num(part)?);
        }
    }
    if out.contains(&0) {
        return Err(invalid_arg!("grid values must be positive"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub batch: Vec<usize>,
    pub channels: Vec<usize>,
    pub spatial: Vec<usize>,
}

impl Grid {
    /// Parses `batch=… channels=… spatial=…` tokens.
    pub fn parse<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut g = Grid { batch: vec![1], channels: vec![16], spatial: vec![8] };
        for tok in tokens {
            let (key, val) = tok.split_once('=').ok_or_else(|| invalid_arg!("expected key=value, got `{tok}`"))?;
            let vals = parse_range(val)?;
            match key {
                "batch" => g.batch = vals,
                "channels" => g.channels = vals,
                "spatial" => g.spatial = vals,
                _ => return Err(invalid_arg!("unknown grid axis `{key}`")),
            }
        }
        Ok(g)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.batch.iter().flat_map(move |&b| {
            self.channels.iter().flat_map(move |&c| self.spatial.iter().map(move |&s| (b, c, s)))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub strategies: Vec<Strategy>,
    pub repeats: usize,
    pub warmups: usize,
    pub workers: usize,
    pub seed: u64,
    pub max_elements: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            repeats: MIN_REPEATS,
            warmups: DEFAULT_WARMUPS,
            workers: default_workers(),
            seed: 0,
            max_elements: DEFAULT_MAX_ELEMENTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
    pub strategy: Strategy,
    /// Median wall time in seconds; `None` for skipped cells.
    pub median_s: Option<f64>,
    pub checksum: String,
    pub skipped: bool,
}

pub const SKIPPED: &str = "skipped";

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Times every strategy on every cell. Output checksums must agree across
/// strategies before a cell's timings are kept.
pub fn benchmark_grid(grid: &Grid, cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repeats < MIN_REPEATS {
        return Err(invalid_arg!("at least {MIN_REPEATS} repeats are required, got {}", cfg.repeats));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    for (batch, channels, spatial) in grid.cells() {
        let out_elems = batch.saturating_mul(pair_count(channels)).saturating_mul(spatial * spatial);
        if channels < 2 || out_elems > cfg.max_elements {
            for &strategy in &cfg.strategies {
                records.push(BenchRecord {
                    batch,
                    channels,
                    spatial,
                    strategy,
                    median_s: None,
                    checksum: SKIPPED.into(),
                    skipped: true,
                });
            }
            log::warn!("skipping cell batch={batch} channels={channels} spatial={spatial}");
            continue;
        }
        let z: Tensor<f32> =
            Tensor::from_fn([batch, channels, spatial, spatial], |_| rng.random_range(-1.0f32..1.0));
        let mut cell = Vec::new();
        for &strategy in &cfg.strategies {
            let plan = DispatchPlan::new(strategy, cfg.workers, channels)?;
            let mut digest = String::new();
            for _ in 0..cfg.warmups.max(1) {
                digest = checksum(&run_dispatch(&z, &plan)?);
            }
            let mut times = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let t0 = Instant::now();
                let out = run_dispatch(&z, &plan)?;
                times.push(t0.elapsed().as_secs_f64());
                std::hint::black_box(out);
            }
            cell.push(BenchRecord {
                batch,
                channels,
                spatial,
                strategy,
                median_s: Some(median(times)),
                checksum: digest,
                skipped: false,
            });
        }
        if cell.windows(2).any(|w| w[0].checksum != w[1].checksum) {
            return Err(Error::InvalidState(format!(
                "strategies disagree at batch={batch} channels={channels} spatial={spatial}"
            )));
        }
        records.extend(cell);
    }
    Ok(records)
}

/// Soft check: medians should not fall as the cell grows, per strategy.
/// Returns one warning per violation.
pub fn monotonicity_warnings(records: &[BenchRecord]) -> Vec<String> {
    let mut warnings = Vec::new();
    for strategy in Strategy::ALL {
        let mut pts: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| r.strategy == strategy)
            .filter_map(|r| r.median_s.map(|t| (r.batch * pair_count(r.channels) * r.spatial * r.spatial, t)))
            .collect();
        pts.sort_by_key(|p| p.0);
        for w in pts.windows(2) {
            if w[1].0 > w[0].0 && w[1].1 < w[0].1 {
                warnings.push(format!(
                    "{strategy}: {} elements took {:.3e}s, less than {:.3e}s for {}",
                    w[1].0, w[1].1, w[0].1, w[0].0
                ));
            }
        }
    }
    warnings
}

pub const BENCH_COLUMNS: [&str; 6] = ["batch", "channels", "spatial", "strategy", "median_s", "checksum"];

pub fn write_bench_csv<W: Write>(mut out: W, records: &[BenchRecord], comment: &str) -> Result<()> {
    writeln!(out, "# {comment}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_COLUMNS)?;
    for r in records {
        w.write_record([
            r.batch.to_string(),
            r.channels.to_string(),
            r.spatial.to_string(),
            r.strategy.to_string(),
            r.median_s.map(|t| format!("{t:e}")).unwrap_or_default(),
            r.checksum.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bench_csv<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row?;
        let field = |i: usize| row.get(i).ok_or_else(|| invalid_arg!("short bench row"));
        let int = |i: usize| -> Result<usize> { field(i)?.parse().map_err(|_| invalid_arg!("bad integer in bench row")) };
        let median_raw = field(4)?;
        let median_s = if median_raw.is_empty() {
            None
        } else {
            Some(median_raw.parse().map_err(|_| invalid_arg!("bad median `{median_raw}`"))?)
        };
        let checksum = field(5)?.to_string();
        records.push(BenchRecord {
            batch: int(0)?,
            channels: int(1)?,
            spatial: int(2)?,
            strategy: field(3)?.parse()?,
            skipped: median_s.is_none() && checksum == SKIPPED,
            median_s,
            checksum,
        });
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
    pub value: f64,
}

/// `(t_direct - t_parity) / (t_direct + t_parity + eps)` per cell. Cells
/// missing either timing are omitted and reported as warnings.
pub fn heatmap(records: &[BenchRecord]) -> (Vec<HeatCell>, Vec<String>) {
    let mut cells = Vec::new();
    let mut warnings = Vec::new();
    let find = |r: &BenchRecord, s: Strategy| {
        records
            .iter()
            .find(|o| o.strategy == s && (o.batch, o.channels, o.spatial) == (r.batch, r.channels, r.spatial))
            .and_then(|o| o.median_s)
    };
    for r in records.iter().filter(|r| r.strategy == Strategy::Direct) {
        match (r.median_s, find(r, Strategy::Parity)) {
            (Some(d), Some(p)) => cells.push(HeatCell {
                batch: r.batch,
                channels: r.channels,
                spatial: r.spatial,
                value: normalized_difference(d, p),
            }),
            _ => warnings.push(format!(
                "no timing pair for batch={} channels={} spatial={}",
                r.batch, r.channels, r.spatial
            )),
        }
    }
    (cells, warnings)
}

pub fn write_heatmap_csv<W: Write>(mut out: W, cells: &[HeatCell], comment: &str) -> Result<()> {
    writeln!(out, "# {comment}")?;
    writeln!(out, "# {HEATMAP_CAVEAT}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["batch", "channels", "spatial", "normalized_diff"])?;
    for c in cells {
        w.write_record([c.batch.to_string(), c.channels.to_string(), c.spatial.to_string(), format!("{:e}", c.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reference result for comparisons.
pub fn reference<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    cross_hadamard_values(z)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest, ProptestConfig};

    fn random(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn plans_partition_pairs() {
        for s in Strategy::ALL {
            for w in [1, 2, 3, 8, 100] {
                for c in [2, 3, 4, 7, 16] {
                    let p = DispatchPlan::new(s, w, c).unwrap();
                    assert!(p.is_partition(), "{s} w={w} c={c}");
                    assert_eq!(p, DispatchPlan::new(s, w, c).unwrap());
                }
            }
        }
        assert!(DispatchPlan::new(Strategy::Direct, 0, 4).is_err());
        assert!(DispatchPlan::new(Strategy::Parity, 2, 1).is_err());
    }

    #[test]
    fn strategies_agree_bitwise() {
        let z = random(1, [2, 16, 8, 8]);
        let want = checksum(&reference(&z).unwrap());
        for s in Strategy::ALL {
            for w in [1, 2, 4, 8] {
                let out = run_dispatch(&z, &DispatchPlan::new(s, w, 16).unwrap()).unwrap();
                assert_eq!(checksum(&out), want, "{s} w={w}");
            }
        }
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let z = random(2, [1, 5, 2, 2]);
        assert!(run_dispatch(&z, &DispatchPlan::new(Strategy::Naive, 1, 4).unwrap()).is_err());
    }

    #[test]
    fn heatmap_arithmetic() {
        assert_eq!(normalized_difference(1.0, 1.0), 0.0);
        assert!((normalized_difference(2.0, 1.0) - 1.0 / 3.0).abs() < 1e-9);
        let rec = |s, t| BenchRecord {
            batch: 1,
            channels: 4,
            spatial: 2,
            strategy: s,
            median_s: t,
            checksum: "x".into(),
            skipped: false,
        };
        let (cells, warn) = heatmap(&[rec(Strategy::Direct, Some(2.0)), rec(Strategy::Parity, Some(1.0))]);
        assert_eq!(cells.len(), 1);
        assert!(warn.is_empty());
        let (cells, warn) = heatmap(&[rec(Strategy::Direct, Some(2.0))]);
        assert!(cells.is_empty());
        assert_eq!(warn.len(), 1);
    }

    #[test]
    fn ranges_double_and_include_end() {
        assert_eq!(parse_range("16..256").unwrap(), [16, 32, 64, 128, 256]);
        assert_eq!(parse_range("8..224").unwrap(), [8, 16, 32, 64, 128, 224]);
        assert_eq!(parse_range("1,8").unwrap(), [1, 8]);
        assert!(parse_range("0..4").is_err());
        assert!(parse_range("x").is_err());
        let g = Grid::parse(["batch=1,2", "channels=4", "spatial=2..4"]).unwrap();
        assert_eq!(g.cells().count(), 4);
        assert!(Grid::parse(["depth=3"]).is_err());
    }

    #[test]
    fn grid_round_trips_through_csv() {
        let grid = Grid::parse(["batch=1,2", "channels=4..8", "spatial=2,3"]).unwrap();
        let cfg = BenchConfig { workers: 2, max_elements: 100, ..Default::default() };
        let records = benchmark_grid(&grid, &cfg).unwrap();
        assert_eq!(records.len(), 8 * 3);
        assert!(records.iter().any(|r| r.skipped));
        assert!(records.iter().any(|r| !r.skipped));
        for r in &records {
            if let Some(t) = r.median_s {
                assert!(t >= 0.0);
            }
        }
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &records, "test").unwrap();
        assert!(buf.starts_with(b"# test\nbatch,channels,spatial,strategy,median_s,checksum\n"));
        assert_eq!(read_bench_csv(&buf[..]).unwrap(), records);
        let (cells, _) = heatmap(&records);
        assert!(cells.iter().all(|c| c.value > -1.0 && c.value < 1.0));
        assert!(benchmark_grid(&grid, &BenchConfig { repeats: 3, ..cfg }).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn any_plan_matches_reference(n in 1usize..3, c in 2usize..12, h in 1usize..5, w in 1usize..9, seed in any::<u64>()) {
            let z = random(seed, [n, c, h, h]);
            let want = reference(&z).unwrap();
            for s in Strategy::ALL {
                let out = run_dispatch(&z, &DispatchPlan::new(s, w, c).unwrap()).unwrap();
                prop_assert_eq!(out.data(), want.data());
            }
        }
    }
}
