use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use unmix_core::datagen::{generate_dataset_with, MixingConfig, MixtureSample};
use unmix_core::eval::evaluate;
use unmix_core::infer::estimate_all_with;
use unmix_core::model::{Model, ModelConfig};
use unmix_core::par::Execution;
use unmix_core::train::mixture_batch;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_config() -> ModelConfig {
    ModelConfig {
        encoder_channels: vec![8, 16, 32],
        encoding_channels: 8,
        decoder_channels: vec![48, 24, 12],
        ..Default::default()
    }
}

fn generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_dataset");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, 64), |b| {
            b.iter(|| generate_dataset_with(64, 64, &MixingConfig::default(), 0.8, exec).unwrap())
        });
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let model = Model::<f32>::build(&bench_config(), 0).unwrap();
    let data = generate_dataset_with(40, 64, &MixingConfig::default(), 0.0, Execution::default()).unwrap();
    let refs: Vec<&MixtureSample> = data.test.iter().take(16).collect();
    let x = mixture_batch::<f32>(&refs, 64);

    let mut g = c.benchmark_group("estimate_all");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| estimate_all_with(&model, &x, exec).unwrap()));
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| evaluate(&model, &data.test, 8, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, generation, inference);
criterion_main!(benches);
