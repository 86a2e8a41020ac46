use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use srr_core::fixtures::random_dataset;
use srr_core::risk::{adversarial_risk, srr_estimate};
use srr_core::rng::{stream, Domain};
use srr_core::{train, LossSpec, Network, ParamGrads, PerturbationSpec, PgdConfig, Regime, TrainConfig};

/// MNIST-shaped network and inputs.
const SIZES: [usize; 3] = [784, 256, 10];

fn forward(c: &mut Criterion) {
    let net = Network::init(&SIZES, 0).unwrap();
    let mut group = c.benchmark_group("forward_batch");
    for batch in [1usize, 64, 1024] {
        let data = random_dataset(batch, 784, 10, 1).unwrap();
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(BenchmarkId::from_parameter(batch), &data, |b, data| {
            b.iter(|| net.forward_batch(black_box(data.inputs()), data.len()).unwrap())
        });
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let net = Network::init(&SIZES, 0).unwrap();
    let data = random_dataset(128, 784, 10, 2).unwrap();
    let mut grads = ParamGrads::zeros_like(&net);
    let mut group = c.benchmark_group("backward");
    group.throughput(Throughput::Elements(128));
    group.bench_function("minibatch_128", |b| {
        b.iter(|| {
            grads.fill_zero();
            net.accumulate_gradients(
                black_box(data.inputs()),
                data.labels(),
                &LossSpec::CrossEntropy,
                &mut grads,
            )
            .unwrap()
        })
    });
    group.bench_function("input_gradients_128", |b| {
        b.iter(|| {
            net.input_gradients(black_box(data.inputs()), data.labels(), &LossSpec::CrossEntropy)
                .unwrap()
        })
    });
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let spec = PerturbationSpec::uniform_linf(0.3).unwrap();
    let x = vec![0.5; 784];
    let mut out = vec![0.0; 784];
    let mut rng = stream(0, Domain::User, 0, 0);
    c.bench_function("sample_uniform_linf_784", |b| {
        b.iter(|| spec.sample_into(black_box(&x), &mut rng, &mut out))
    });
}

fn estimators(c: &mut Criterion) {
    let net = Network::init(&SIZES, 0).unwrap();
    let data = random_dataset(500, 784, 10, 3).unwrap();
    let mut group = c.benchmark_group("estimators");
    group.sample_size(10);
    let spec = PerturbationSpec::uniform_linf(0.3).unwrap();
    group.bench_function("srr_500x10", |b| {
        b.iter(|| srr_estimate(&net, &data, &spec, &LossSpec::ZeroOne, 10, 0).unwrap())
    });
    let pgd = PgdConfig::new(0.157, 7).unwrap();
    group.bench_function("pgd7_500", |b| {
        b.iter(|| adversarial_risk(&net, &data, &pgd, &LossSpec::ZeroOne, 0).unwrap())
    });
    group.finish();
}

fn training(c: &mut Criterion) {
    let data = random_dataset(1024, 784, 10, 4).unwrap();
    let init = Network::init(&SIZES, 0).unwrap();
    let mut group = c.benchmark_group("train_epoch_1024");
    group.sample_size(10);
    let regimes = [
        ("natural", Regime::Natural),
        (
            "corruption",
            Regime::Corruption(PerturbationSpec::uniform_linf(0.3).unwrap()),
        ),
        ("pgd7", Regime::Pgd(PgdConfig::new(0.157, 7).unwrap())),
    ];
    for (name, regime) in regimes {
        let cfg = TrainConfig::new(regime, 1, 0);
        group.bench_function(name, |b| b.iter(|| train(init.clone(), &data, &data, &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, forward, backward, sampling, estimators, training);
criterion_main!(benches);
