use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use neurank::gaussian::{fit_gaussian, gaussian_greedy_rank_capped};
use neurank::probe::{train_probe, TrainConfig};
use neurank::rankers::{iou_rank, mean_select_rank, probeless_rank};
use neurank_bench::fixture;

fn corpus_statistics(c: &mut Criterion) {
    let mut group = c.benchmark_group("corpus_statistics");
    for neurons in [100, 768] {
        let (m, ds) = fixture(neurons, 5000, 1);
        group.bench_with_input(BenchmarkId::new("probeless", neurons), &neurons, |b, _| {
            b.iter(|| probeless_rank(black_box(&m), &ds).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("meanselect", neurons), &neurons, |b, _| {
            b.iter(|| mean_select_rank(black_box(&m), &ds).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("iou", neurons), &neurons, |b, _| {
            b.iter(|| iou_rank(black_box(&m), &ds, 95.0).unwrap())
        });
    }
    group.finish();
}

fn probes(c: &mut Criterion) {
    let mut group = c.benchmark_group("probe");
    group.sample_size(10);
    let (m, ds) = fixture(256, 5000, 2);
    for (name, cfg) in [("lasso", TrainConfig::lasso()), ("lca", TrainConfig::elastic_net())] {
        group.bench_function(name, |b| b.iter(|| train_probe(black_box(&m), &ds, &cfg).unwrap()));
    }
    group.finish();
}

fn gaussian(c: &mut Criterion) {
    let mut group = c.benchmark_group("gaussian_greedy");
    group.sample_size(10);
    let (m, ds) = fixture(100, 5000, 3);
    let model = fit_gaussian(&m, &ds).unwrap();
    group.bench_function("fit_100", |b| b.iter(|| fit_gaussian(black_box(&m), &ds).unwrap()));
    for cap in [10, 50] {
        group.bench_with_input(BenchmarkId::new("select", cap), &cap, |b, &cap| {
            b.iter(|| gaussian_greedy_rank_capped(&model, black_box(&m), &ds, Some(cap)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, corpus_statistics, probes, gaussian);
criterion_main!(benches);
