//! Same work under `Exec::Sequential` and `Exec::Parallel`.
//!
//! `UANET_THREADS` caps the pool; with one core both modes should match.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use uanet::gradcheck::suite::{Case, Instance};
use uanet::gradcheck::CheckOptions;
use uanet::model::{EncoderConfig, NetConfig, UaNet};
use uanet::params::ParamStore;
use uanet::synth::{generate_dataset, Scene, SceneSpec};
use uanet::train::{batch_gradient, evaluate};
use uanet::{seed, Exec};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn small_net() -> (UaNet, ParamStore<f32>) {
    let cfg = NetConfig {
        encoder: EncoderConfig {
            stage_channels: vec![4, 8, 16, 16, 16],
            convs_per_stage: 1,
            dilation_rates: vec![1, 2],
            head_channels: 4,
        },
        ..NetConfig::default()
    };
    let mut store = ParamStore::new();
    let net = UaNet::new(&cfg, &mut store, &mut seed::rng(0, "init")).unwrap();
    (net, store)
}

fn scenes(count: usize) -> Vec<Scene<f32>> {
    let spec = SceneSpec {
        extent: 32,
        ..SceneSpec::default()
    };
    generate_dataset(&spec, 1, count, Exec::Sequential).unwrap()
}

fn bench_batch_gradient(c: &mut Criterion) {
    let (net, mut store) = small_net();
    let batch: Vec<_> = scenes(8).into_iter().map(|s| (s.image, s.mask)).collect();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(batch_gradient(&net, &mut store, &batch, exec).unwrap()))
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let (net, store) = small_net();
    let val = scenes(16);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate(&net, &store, &val, exec).unwrap()))
        });
    }
    group.finish();
}

fn bench_gradcheck(c: &mut Criterion) {
    let inst = Instance::new(Case::Conv2d, 0).unwrap();
    let mut group = c.benchmark_group("gradcheck_conv2d");
    group.sample_size(10);
    for (name, exec) in MODES {
        let opts = CheckOptions {
            exec,
            ..CheckOptions::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(inst.check(&opts).unwrap()))
        });
    }
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let mut group = c.benchmark_group("generate_dataset");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(generate_dataset::<f32>(&spec, 3, 32, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_batch_gradient,
    bench_evaluate,
    bench_gradcheck,
    bench_generate
);
criterion_main!(benches);
