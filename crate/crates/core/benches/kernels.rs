use std::hint::black_box;

use bnnkit::bitcore::{xnor_popcount, BitTensor};
use bnnkit::compile::compile_model;
use bnnkit::data::synth_quadrant_dataset;
use bnnkit::engine::classify_batch;
use bnnkit::netspec::{Arch, NetworkSpec};
use bnnkit::par::Execution;
use bnnkit::perfmodel::suggest_folding;
use bnnkit::train::{forward_train, ForwardOptions, TrainConfig, TrainedModel, Trainer};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXECS: [(&str, Execution); 2] = [("parallel", Execution::Auto), ("sequential", Execution::Sequential)];

fn xnor(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("xnor_popcount");
    for f in [64usize, 576, 4608] {
        let a = BitTensor::from_bools((0..f).map(|_| rng.random::<bool>()));
        let b = BitTensor::from_bools((0..f).map(|_| rng.random::<bool>()));
        g.throughput(Throughput::Elements(f as u64));
        g.bench_with_input(BenchmarkId::from_parameter(f), &f, |bench, _| {
            bench.iter(|| xnor_popcount(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn engine(c: &mut Criterion) {
    let spec = NetworkSpec::builtin(Arch::NCnv);
    let model = compile_model(&TrainedModel::init(&spec, 1).unwrap(), &spec).unwrap();
    let images = synth_quadrant_dataset(8, 2).images;
    let mut g = c.benchmark_group("classify_batch");
    g.sample_size(10);
    g.throughput(Throughput::Elements(images.len() as u64));
    for (name, exec) in EXECS {
        g.bench_function(name, |b| b.iter(|| classify_batch(&model, black_box(&images), exec).unwrap()));
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let spec = NetworkSpec::builtin(Arch::NCnv);
    let data = synth_quadrant_dataset(16, 3);
    let refs: Vec<_> = data.images.iter().collect();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    for (name, exec) in EXECS {
        let model = TrainedModel::init(&spec, 1).unwrap();
        g.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| forward_train(&model, black_box(&refs), ForwardOptions::train().with_exec(exec)).unwrap())
        });
    }
    let mut trainer = Trainer::new(TrainedModel::init(&spec, 1).unwrap(), TrainConfig::default()).unwrap();
    g.bench_function("step", |b| b.iter(|| trainer.step(black_box(&refs), &data.labels).unwrap()));
    g.finish();
}

fn dse(c: &mut Criterion) {
    let spec = NetworkSpec::builtin(Arch::Cnv);
    c.bench_function("suggest_folding_cnv", |b| b.iter(|| suggest_folding(black_box(&spec), 110, 180).unwrap()));
}

criterion_group!(benches, xnor, engine, training, dse);
criterion_main!(benches);
