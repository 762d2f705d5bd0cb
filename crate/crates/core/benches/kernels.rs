//! Sequential vs rayon matmul at the shapes training hits, plus one
//! training epoch on a small graph. Run with and without
//! `--no-default-features` to compare the feature-gated paths end to end.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mtplan_core::autodiff::kernels::{matmul_with, Exec};
use mtplan_core::dataset::{build_path_dataset, DatasetConfig};
use mtplan_core::graph::generate_random_dag;
use mtplan_core::model::{ModelConfig, TransferKind};
use mtplan_core::rng::rng_from_seed;
use mtplan_core::trainer::{train, TrainConfig};
use rand::Rng;

fn random(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    // (batch rows, model dim, output): projections and the vocabulary head.
    for (m, k, n) in [(64 * 24, 120, 120), (64 * 24, 120, 101), (256, 256, 256)] {
        let a = random(m * k, 1);
        let b = random(k * n, 2);
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, format!("{m}x{k}x{n}")), &exec, |bench, &exec| {
                bench.iter(|| matmul_with(exec, black_box(&a), black_box(&b), m, k, n))
            });
        }
    }
    group.finish();
}

fn training_epoch(c: &mut Criterion) {
    let g = generate_random_dag(30, 0.15, 1).unwrap();
    let ds = build_path_dataset(
        &g,
        &DatasetConfig {
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let seqs = ds.train_tokens();
    let config = ModelConfig::next_token(31, 64, 34).with_mtp(2, TransferKind::Linear, true);
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("epoch_30_nodes", |b| b.iter(|| train(config, 0, &seqs, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, matmul, training_epoch);
criterion_main!(benches);
