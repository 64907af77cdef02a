use std::hint::black_box;

use ach_bench::{ach_layer, input};
use ach_core::arch::REFERENCE_SMALL;
use ach_core::cost::model_report;
use ach_core::pairing::{index_from_pair, pair_count, pair_from_index};
use ach_core::scheduler::{default_workers, run_dispatch, DispatchPlan, Strategy};
use ach_core::{ArchSpec, Mode, Tape};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn expansion(c: &mut Criterion) {
    let workers = default_workers();
    let mut group = c.benchmark_group("expansion");
    for cs in [16, 32] {
        let z = input(8, cs, 28, 1);
        group.throughput(Throughput::Elements((8 * pair_count(cs) * 28 * 28) as u64));
        for strategy in Strategy::ALL {
            let plan = DispatchPlan::new(strategy, workers, cs).unwrap();
            group.bench_with_input(BenchmarkId::new(strategy.to_string(), cs), &z, |b, z| {
                b.iter(|| run_dispatch(black_box(z), &plan).unwrap())
            });
        }
    }
    group.finish();
}

fn pair_index(c: &mut Criterion) {
    let n = 512;
    c.bench_function("pair_index/roundtrip_512", |b| {
        b.iter(|| {
            let mut acc = 0;
            for p in 0..pair_count(n) {
                let (i, j) = pair_from_index(black_box(p), n).unwrap();
                acc += index_from_pair(i, j, n).unwrap();
            }
            acc
        })
    });
}

fn ach_layer_step(c: &mut Criterion) {
    let (mut layer, mut params) = ach_layer(32, 8, 3).unwrap();
    let x = input(8, 32, 16, 3);
    c.bench_function("ach_layer/forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = layer.forward(&mut tape, &params, xv, Mode::Train).unwrap();
            let loss = tape.mean(out.y).unwrap();
            params.zero_grad();
            tape.backward(loss, &mut params).unwrap()
        })
    });
}

fn cost_report(c: &mut Criterion) {
    let spec: ArchSpec = REFERENCE_SMALL.parse().unwrap();
    c.bench_function("cost/reference_report", |b| b.iter(|| model_report(black_box(&spec), 224).unwrap()));
}

criterion_group!(benches, expansion, pair_index, ach_layer_step, cost_report);
criterion_main!(benches);
