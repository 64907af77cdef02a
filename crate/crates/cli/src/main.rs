use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ach_core::cost::{model_report, ratio_curves, write_curves_csv, CurveMode, DEFAULT_INPUT};
use ach_core::demo::{train, DemoRun, RunConfig, TauControl, Variant, TARGET_ACCURACY};
use ach_core::gradcheck::{mutation_sentinel, run_suite, GradCheckReport, Scope};
use ach_core::pairing::{pair_count, pair_from_index, PairMap};
use ach_core::sampling::{TAU_MAX, TAU_MIN};
use ach_core::scheduler::{
    benchmark_grid, default_workers, heatmap, monotonicity_warnings, write_bench_csv, write_heatmap_csv, BenchConfig,
    Grid, Strategy, DEFAULT_MAX_ELEMENTS, DEFAULT_WARMUPS, MIN_REPEATS,
};
use ach_core::{arch::REFERENCE_SMALL, ArchSpec, DType};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ach", version, about = "Cross-Hadamard expansion toolkit: checks, demo, benches and cost reports")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Global {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    dtype: Precision,
    /// Worker threads for kernel dispatch; defaults to available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, or a file path for single-output commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare tape gradients with central finite differences.
    GradCheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Add the DyNorm sign-fault fixture; the run is then expected to fail.
        #[arg(long)]
        inject_sign_fault: bool,
    },
    /// Train the miniature network on the synthetic product task.
    TrainDemo {
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// `adaptive` or an anneal schedule: linear, exponential, cosine.
        #[arg(long, default_value = "adaptive")]
        tau: TauControl,
        #[arg(long, default_value = "learnable")]
        variant: Variant,
        #[arg(long, default_value_t = 4)]
        c_sel: usize,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Also run every ablation variant under each seed.
        #[arg(long)]
        ablations: bool,
    },
    /// Time the expansion kernel under each dispatch strategy.
    BenchKernels {
        /// Tokens such as `batch=1,8 channels=16..256 spatial=8..224`.
        #[arg(long, num_args = 1.., default_values_t = ["batch=1".to_string(), "channels=16".into(), "spatial=8".into()])]
        grid: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "naive,direct,parity")]
        strategies: Vec<Strategy>,
        #[arg(long, default_value_t = MIN_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = DEFAULT_WARMUPS)]
        warmups: usize,
        /// Cells with more output elements than this are skipped.
        #[arg(long, default_value_t = DEFAULT_MAX_ELEMENTS)]
        max_elements: usize,
    },
    /// Static parameter and FLOP accounting, or the ratio curves.
    CostModel {
        /// Architecture file; the built-in reference network when omitted.
        #[arg(long, conflicts_with = "curves")]
        arch: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_INPUT)]
        input: usize,
        #[arg(long)]
        curves: Option<CurveMode>,
        /// Spatial side used by the curves.
        #[arg(long, default_value_t = 14)]
        side: u64,
    },
    /// Dump the pair-index mapping as CSV `p,i,j`.
    PairMap {
        #[arg(long)]
        n: usize,
        #[arg(long, conflicts_with = "all")]
        p: Option<usize>,
        #[arg(long)]
        all: bool,
    },
    /// Curves, pair maps, a small bench grid and a manifest in one directory.
    ReportAll,
}

fn comment(g: &Global) -> String {
    format!("ach {} seed={} dtype={}", ach_core::VERSION, g.seed, DType::from(g.dtype))
}

/// `--out` names a file when it has an extension and is not an existing
/// directory, otherwise a directory.
fn output(out: Option<&Path>, default_name: &str) -> Result<PathBuf> {
    let path = match out {
        Some(p) if p.extension().is_some() && !p.is_dir() => p.to_path_buf(),
        Some(dir) => dir.join(default_name),
        None => PathBuf::from(default_name),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

fn out_dir(out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?))
}

fn grad_check(g: &Global, scope: Scope, seeds: u64, inject: bool) -> Result<bool> {
    let dtype = DType::from(g.dtype);
    let seeds: Vec<u64> = (g.seed..g.seed + seeds.max(1)).collect();
    let mut report = run_suite(scope, &seeds, dtype)?;
    if let Some(w) = report.policy.warning.as_deref() {
        log::warn!("{w}");
    }
    if inject {
        report.records.push(mutation_sentinel(g.seed)?);
    }
    let path = output(g.out.as_deref(), "gradcheck.csv")?;
    report.write_csv(create(&path)?, &comment(g))?;
    print_grad_summary(&report);
    println!("wrote {}", path.display());
    Ok(report.passed())
}

fn print_grad_summary(report: &GradCheckReport) {
    for r in report.failures() {
        println!("FAIL {} seed {} max rel err {:.3e} (tol {:.0e})", r.name, r.seed, r.max_rel_err, report.policy.tol);
    }
    println!(
        "{} checks, {} failed, worst rel err {:.3e}, tol {:.0e}",
        report.records.len(),
        report.failures().count(),
        report.worst(),
        report.policy.tol
    );
}

fn run_one(cfg: &RunConfig, dtype: DType) -> Result<DemoRun> {
    Ok(match dtype {
        DType::F64 => train::<f64>(cfg)?,
        DType::F32 => train::<f32>(cfg)?,
    })
}

fn train_demo(g: &Global, base: RunConfig, seeds: u64, ablations: bool) -> Result<bool> {
    let dir = out_dir(g.out.as_deref())?;
    let variants: Vec<Variant> = if ablations { Variant::ALL.to_vec() } else { vec![base.variant] };
    let mut ok = true;
    let mut manifest_runs = Vec::new();
    for seed in g.seed..g.seed + seeds.max(1) {
        for &variant in &variants {
            let cfg = RunConfig { seed, variant, ..base.clone() };
            let run = run_one(&cfg, g.dtype.into())?;
            let stem = format!("demo_{variant}_seed{seed}");
            run.write_metrics_csv(create(&dir.join(format!("{stem}_metrics.csv")))?, &comment(&Global { seed, ..g.clone() }))?;
            run.write_histogram_csv(create(&dir.join(format!("{stem}_histogram.csv")))?, &comment(&Global { seed, ..g.clone() }))?;
            let last = run.epochs.last().context("run recorded no epochs")?;
            let taus_ok = run.all_taus().all(|t| (TAU_MIN..=TAU_MAX).contains(&t));
            let to_target = run.epochs_to(TARGET_ACCURACY);
            println!(
                "{variant} seed {seed}: acc {:.3}, {:.0}% at epoch {}, informative {:?} selected {} ({:.0}% of samples), {:.1}s",
                last.train_acc,
                100.0 * TARGET_ACCURACY,
                to_target.map_or("never".to_string(), |e| e.to_string()),
                run.informative,
                run.informative_selected(),
                100.0 * last.informative_frac,
                run.elapsed_s
            );
            if !taus_ok {
                log::error!("{variant} seed {seed}: temperature left [{TAU_MIN}, {TAU_MAX}]");
            }
            ok &= taus_ok && (variant != Variant::Learnable || to_target.is_some());
            manifest_runs.push(json!({
                "config": cfg,
                "final_acc": last.train_acc,
                "epochs_to_target": to_target,
                "informative": run.informative,
                "informative_selected": run.informative_selected(),
                "elapsed_s": run.elapsed_s,
            }));
        }
    }
    let manifest = json!({
        "tool": "ach",
        "version": ach_core::VERSION,
        "seed": g.seed,
        "dtype": DType::from(g.dtype),
        "out": dir,
        "runs": manifest_runs,
    });
    fs::write(dir.join("demo_manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ok)
}

fn bench_config(g: &Global, strategies: Vec<Strategy>, repeats: usize, warmups: usize, max_elements: usize) -> BenchConfig {
    BenchConfig {
        strategies,
        repeats,
        warmups,
        workers: g.workers.unwrap_or_else(default_workers),
        seed: g.seed,
        max_elements,
    }
}

fn bench(g: &Global, grid: &Grid, cfg: &BenchConfig, bench_path: &Path, heat_path: &Path) -> Result<()> {
    let records = benchmark_grid(grid, cfg)?;
    for w in monotonicity_warnings(&records) {
        log::warn!("{w}");
    }
    write_bench_csv(create(bench_path)?, &records, &comment(g))?;
    if cfg.strategies.contains(&Strategy::Direct) && cfg.strategies.contains(&Strategy::Parity) {
        let (cells, warnings) = heatmap(&records);
        for w in warnings {
            log::warn!("{w}");
        }
        write_heatmap_csv(create(heat_path)?, &cells, &comment(g))?;
    }
    Ok(())
}

fn bench_kernels(
    g: &Global,
    grid: &[String],
    strategies: Vec<Strategy>,
    repeats: usize,
    warmups: usize,
    max_elements: usize,
) -> Result<bool> {
    let grid = Grid::parse(grid.iter().flat_map(|s| s.split_whitespace()))?;
    let cfg = bench_config(g, strategies, repeats, warmups, max_elements);
    let bench_path = output(g.out.as_deref(), "bench.csv")?;
    let heat_path = bench_path.with_file_name("heatmap.csv");
    bench(g, &grid, &cfg, &bench_path, &heat_path)?;
    println!("wrote {} ({} workers)", bench_path.display(), cfg.workers);
    Ok(true)
}

fn cost_model(g: &Global, arch: Option<&Path>, input: usize, curves: Option<CurveMode>, side: u64) -> Result<bool> {
    if let Some(mode) = curves {
        let path = output(g.out.as_deref(), "curves.csv")?;
        write_curves_csv(create(&path)?, &[(mode, ratio_curves(mode, side)?)], &comment(g))?;
        println!("wrote {}", path.display());
        return Ok(true);
    }
    let text = match arch {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => REFERENCE_SMALL.to_string(),
    };
    let spec: ArchSpec = text.parse()?;
    let report = model_report(&spec, input)?;
    let path = output(g.out.as_deref(), "report.json")?;
    if path.extension().is_some_and(|e| e == "csv") {
        report.write_csv(create(&path)?, &comment(g))?;
    } else {
        fs::write(&path, report.to_json()?)?;
    }
    println!(
        "{} params, {} MACs, {} FLOPs at {input}x{input}; wrote {}",
        report.total_params,
        report.total_macs,
        report.total_flops,
        path.display()
    );
    Ok(true)
}

fn write_pairs<W: Write>(mut out: W, n: usize, which: Option<usize>, with_n: bool, comment: &str) -> Result<()> {
    writeln!(out, "# {comment}")?;
    let mut w = csv::Writer::from_writer(out);
    if with_n {
        w.write_record(["n", "p", "i", "j"])?;
    } else {
        w.write_record(["p", "i", "j"])?;
    }
    let range = match which {
        Some(p) => p..p + 1,
        None => 0..pair_count(n),
    };
    for p in range {
        let (i, j) = pair_from_index(p, n)?;
        let mut row = vec![p.to_string(), i.to_string(), j.to_string()];
        if with_n {
            row.insert(0, n.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn pair_map(g: &Global, n: usize, p: Option<usize>) -> Result<bool> {
    PairMap::new(n)?;
    match g.out.as_deref() {
        Some(out) => {
            let path = output(Some(out), "pairmap.csv")?;
            write_pairs(create(&path)?, n, p, false, &comment(g))?;
        }
        None => write_pairs(io::stdout().lock(), n, p, false, &comment(g))?,
    }
    Ok(true)
}

fn report_all(g: &Global) -> Result<bool> {
    let dir = out_dir(g.out.as_deref())?;
    let workers = g.workers.unwrap_or_else(default_workers);
    let mut failures: Vec<String> = Vec::new();
    let mut files = Vec::new();

    let curves = (|| -> Result<()> {
        let sweeps = [CurveMode::Channels, CurveMode::Ratio]
            .into_iter()
            .map(|m| Ok((m, ratio_curves(m, 14)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(write_curves_csv(create(&dir.join("curves.csv"))?, &sweeps, &comment(g))?)
    })();
    record(&mut failures, &mut files, "curves.csv", curves);

    let pairs = (|| -> Result<()> {
        let mut out = create(&dir.join("pairmap.csv"))?;
        writeln!(out, "# {}", comment(g))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "p", "i", "j"])?;
        for n in [16, 32] {
            for (p, (i, j)) in PairMap::new(n)?.iter().enumerate() {
                w.write_record([n.to_string(), p.to_string(), i.to_string(), j.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    })();
    record(&mut failures, &mut files, "pairmap.csv", pairs);

    let grid = Grid { batch: vec![1, 2], channels: vec![8, 16], spatial: vec![8, 16] };
    let cfg = bench_config(g, Strategy::ALL.to_vec(), MIN_REPEATS, DEFAULT_WARMUPS, DEFAULT_MAX_ELEMENTS);
    let bench_res = bench(g, &grid, &BenchConfig { workers, ..cfg }, &dir.join("bench.csv"), &dir.join("heatmap.csv"));
    let bench_ok = bench_res.is_ok();
    record(&mut failures, &mut files, "bench.csv", bench_res);
    if bench_ok {
        files.push("heatmap.csv".to_string());
    }

    let manifest = json!({
        "tool": "ach",
        "version": ach_core::VERSION,
        "seed": g.seed,
        "dtype": DType::from(g.dtype),
        "workers": workers,
        "bench_grid": grid,
        "files": files,
        "failures": failures,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for f in &failures {
        log::error!("{f}");
    }
    println!("wrote report bundle to {}", dir.display());
    Ok(failures.is_empty())
}

fn record(failures: &mut Vec<String>, files: &mut Vec<String>, name: &str, r: Result<()>) {
    match r {
        Ok(()) => files.push(name.to_string()),
        Err(e) => failures.push(format!("{name}: {e:#}")),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    if g.workers == Some(0) {
        bail!("--workers must be positive");
    }
    match cli.cmd {
        Cmd::GradCheck { scope, seeds, inject_sign_fault } => grad_check(g, scope, seeds, inject_sign_fault),
        Cmd::TrainDemo { epochs, batch, lr, tau, variant, c_sel, seeds, ablations } => {
            let base = RunConfig { seed: g.seed, epochs, batch, lr, tau, variant, c_sel, ..Default::default() };
            train_demo(g, base, seeds, ablations)
        }
        Cmd::BenchKernels { grid, strategies, repeats, warmups, max_elements } => {
            bench_kernels(g, &grid, strategies, repeats, warmups, max_elements)
        }
        Cmd::CostModel { arch, input, curves, side } => cost_model(g, arch.as_deref(), input, curves, side),
        Cmd::PairMap { n, p, all: _ } => pair_map(g, n, p),
        Cmd::ReportAll => report_all(g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
