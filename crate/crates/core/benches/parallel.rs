//! Sequential versus rayon execution of the independent outer loops.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use alora_core::adapters::{AdapterMode, AdapterShape, AdapterSpec};
use alora_core::bench::{run_bench, BenchPlan};
use alora_core::engine::Engine;
use alora_core::exec::Exec;
use alora_core::model::{ModelConfig, ModelWeights};
use alora_core::trainer::{finite_difference_check, AdapterParams, SftExample};
use alora_core::verify::{run_verify, VerifyOptions};

const STRATEGIES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn engine() -> Engine {
    let c = ModelConfig::default();
    Engine::new(c.clone(), ModelWeights::random(&c, 0).unwrap()).unwrap()
}

fn verify_trials(c: &mut Criterion) {
    let e = engine();
    let mut group = c.benchmark_group("verify_kv_trials");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        let opts = VerifyOptions {
            kv_trials: 16,
            oracle_trials: 0,
            reduction_trials: 0,
            exec,
            ..VerifyOptions::new(0, 1)
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(run_verify(&e, &opts).unwrap()))
        });
    }
    group.finish();
}

fn bench_cells(c: &mut Criterion) {
    let e = engine();
    let plan = BenchPlan {
        prompt_lengths: vec![64, 128],
        answer_tokens: 16,
        n_adapters: vec![1, 2],
        repetitions: 1,
        ..BenchPlan::default()
    };
    let mut group = c.benchmark_group("bench_cells");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(run_bench(&e, &plan, exec).unwrap()))
        });
    }
    group.finish();
}

fn gradient_check(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let w = ModelWeights::random(&cfg, 0).unwrap().cast::<f64>();
    let shape = AdapterShape::new(1, AdapterMode::Alora, 4).with_invocation(vec![30, 31]);
    let spec = AdapterSpec::random(&cfg, shape, 0.3, 1).unwrap();
    let params = AdapterParams::<f64>::from_spec(&spec);
    let example = SftExample {
        context: vec![3, 5, 7, 9],
        invocation: vec![30, 31],
        target: vec![4],
    };
    let mut group = c.benchmark_group("finite_difference_check");
    group.sample_size(10);
    for (name, exec) in STRATEGIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                black_box(
                    finite_difference_check(
                        &w,
                        &cfg,
                        &params,
                        &example,
                        AdapterMode::Alora,
                        1e-5,
                        exec,
                    )
                    .unwrap(),
                )
            })
        });
    }
    group.finish();
}

criterion_group!(benches, verify_trials, bench_cells, gradient_check);
criterion_main!(benches);
