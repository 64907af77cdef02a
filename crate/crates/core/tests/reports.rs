use ach_core::arch::REFERENCE_SMALL;
use ach_core::cost::{model_report, ratio_curves, write_curves_csv, CurveMode};
use ach_core::gradcheck::{run_suite, Scope};
use ach_core::scheduler::{benchmark_grid, heatmap, read_bench_csv, write_bench_csv, BenchConfig, Grid, Strategy};
use ach_core::{ArchSpec, DType};

fn csv_body(bytes: &[u8]) -> Vec<String> {
    String::from_utf8(bytes.to_vec()).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn bench_csv_round_trips_with_skipped_cells() {
    let grid = Grid::parse(["batch=1", "channels=2,6", "spatial=3,64"]).unwrap();
    let cfg = BenchConfig { workers: 2, seed: 4, max_elements: 1000, ..Default::default() };
    let records = benchmark_grid(&grid, &cfg).unwrap();
    assert_eq!(records.len(), 4 * Strategy::ALL.len());
    assert!(records.iter().any(|r| r.skipped));

    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &records, "test").unwrap();
    assert_eq!(csv_body(&buf)[0], "# test");
    let back = read_bench_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!((a.batch, a.channels, a.spatial, a.strategy, a.skipped), (b.batch, b.channels, b.spatial, b.strategy, b.skipped));
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.median_s.is_some(), b.median_s.is_some());
    }
    let (cells, warnings) = heatmap(&back);
    assert_eq!(cells.len() + warnings.len(), 4);
    assert!(cells.iter().all(|c| c.value.abs() < 1.0));
}

#[test]
fn cost_report_csv_ends_with_totals() {
    let spec: ArchSpec = REFERENCE_SMALL.parse().unwrap();
    let report = model_report(&spec, 224).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf, "c").unwrap();
    let lines = csv_body(&buf);
    let total = lines.last().unwrap();
    assert!(total.starts_with(&format!("total,,{},{},{}", report.total_params, report.total_macs, report.total_flops)));
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["layers"].as_array().unwrap().len(), report.layers.len());
}

#[test]
fn curves_csv_tags_each_sweep() {
    let sweeps: Vec<_> =
        [CurveMode::Channels, CurveMode::Ratio].into_iter().map(|m| (m, ratio_curves(m, 7).unwrap())).collect();
    let mut buf = Vec::new();
    write_curves_csv(&mut buf, &sweeps, "k").unwrap();
    let lines = csv_body(&buf);
    assert_eq!(lines.len(), 2 + 32 + 21);
    assert!(lines[2].starts_with("channels,16,64,"));
    assert!(lines.last().unwrap().starts_with("ratio,64,1536,"));
}

#[test]
fn gradcheck_csv_lists_every_record() {
    let report = run_suite(Scope::Module, &[2], DType::F64).unwrap();
    assert!(report.passed());
    let mut buf = Vec::new();
    report.write_csv(&mut buf, "g").unwrap();
    assert_eq!(csv_body(&buf).len(), 2 + report.records.len());
}
