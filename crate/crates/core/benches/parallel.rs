use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use survseq::fixtures;
use survseq::metrics::{evaluate_model, EvalOptions};
use survseq::par::Execution;
use survseq::trainer::{early_stopping_split, train_with, TrainConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn training_epochs(c: &mut Criterion) {
    let data = fixtures::longitudinal(200, 1);
    let (train, val) = early_stopping_split(&data, 0.2, 1);
    let config = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_two_epochs");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train_with(black_box(&config), &train, &val, exec).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let data = fixtures::longitudinal(400, 2);
    let config = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let model = train_with(&config, &data, &data.subset(&[]), Execution::Sequential).unwrap();
    let mut group = c.benchmark_group("evaluate_400_patients");
    group.sample_size(20);
    for (name, exec) in MODES {
        let opts = EvalOptions {
            execution: exec,
            ..EvalOptions::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| evaluate_model(&model, black_box(&data), opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, training_epochs, evaluation);
criterion_main!(benches);
