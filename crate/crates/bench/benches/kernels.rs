use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use isrflow::benchmarks::{self, DistributionKind, KinematicsSpec};
use isrflow::config::RunConfig;
use isrflow::experiment::{build_model, training_data};
use isrflow::train::objective_graph;

fn kinematics_config() -> RunConfig {
    RunConfig::from_toml(
        "experiment = \"inverse\"\n[model]\nblocks = 6\nhidden_layers = 3\n\
         [benchmark]\nkind = \"kinematics\"\nn_train = 100\n",
    )
    .expect("valid config")
}

fn tape(c: &mut Criterion) {
    let cfg = kinematics_config();
    let model = build_model(&cfg).expect("model");
    let batch = training_data(&cfg).expect("data");
    c.bench_function("tape forward, 6 blocks, batch 100", |b| {
        b.iter_batched(
            || objective_graph(&model, &batch, 1e-3, 0.05).expect("graph"),
            |mut g| black_box(g.tape.forward_eval(&g.inputs).expect("finite")),
            BatchSize::SmallInput,
        )
    });
    let mut g = objective_graph(&model, &batch, 1e-3, 0.05).expect("graph");
    g.tape.forward_eval(&g.inputs).expect("finite");
    c.bench_function("tape backward, 6 blocks, batch 100", |b| {
        b.iter(|| black_box(g.tape.backward(g.loss).expect("gradients")))
    });
}

fn mmd(c: &mut Criterion) {
    let a = benchmarks::sample_target(DistributionKind::Ring, 1000, 1).expect("samples");
    let b = benchmarks::sample_target(DistributionKind::Ring, 1000, 2).expect("samples");
    c.bench_function("mmd, 1000 x 1000 in 2-D", |bench| {
        bench.iter(|| black_box(benchmarks::mmd(&a, &b).expect("mmd")))
    });
}

fn rejection(c: &mut Criterion) {
    let spec = KinematicsSpec::default();
    let mut group = c.benchmark_group("rejection");
    group.sample_size(10);
    group.bench_function("100 posterior draws at eps 0.05", |b| {
        b.iter(|| black_box(spec.rejection_sample([0.0, 1.5], 0.05, 100, 3).expect("oracle")))
    });
    group.finish();
}

criterion_group!(kernels, tape, mmd, rejection);
criterion_main!(kernels);
