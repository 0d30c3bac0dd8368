//! Sequential vs rayon execution of the hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use crpt_core::collect::{collect_all, collect_random, DomainBuffer};
use crpt_core::envsuite::DomainSpec;
use crpt_core::exec::{self, Mode};
use crpt_core::protolearn::{init_model, SslConfig, Trainer};
use crpt_core::seeds;

const MODES: [(&str, Mode); 2] = [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)];

fn buffers() -> Vec<DomainBuffer> {
    ["pendulum", "point_mass"]
        .iter()
        .map(|d| collect_random(&DomainSpec::desk(d).unwrap(), 1000, 1000, 1).unwrap())
        .collect()
}

fn encode(c: &mut Criterion) {
    let bufs = buffers();
    let cfg = SslConfig::desk();
    let (stack, _) = init_model::<f32>(&cfg, 3, 32, 0).unwrap();
    let idx = bufs[0].sample_pairs(256, &mut seeds::rng(0)).unwrap();
    let x = bufs[0].batch::<f32>(&idx, 0, 3);
    let mut group = c.benchmark_group("encode_256");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| stack.features(&x).unwrap())
        });
    }
    group.finish();
}

fn ssl_update(c: &mut Criterion) {
    let bufs = buffers();
    let refs: Vec<&DomainBuffer> = bufs.iter().collect();
    let cfg = SslConfig { coverage_every: 0, ..SslConfig::desk() };
    let mut group = c.benchmark_group("ssl_update");
    group.sample_size(20);
    for (name, mode) in MODES {
        let (stack, bank) = init_model::<f32>(&cfg, 3, 32, 0).unwrap();
        let mut trainer = Trainer::new(stack, bank, &cfg, 0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| trainer.update(&refs).unwrap())
        });
    }
    group.finish();
}

fn collection(c: &mut Criterion) {
    let specs: Vec<DomainSpec> = ["pendulum", "point_mass", "cartpole"]
        .iter()
        .map(|d| DomainSpec::desk(d).unwrap())
        .collect();
    let mut group = c.benchmark_group("collect_3x500");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| collect_all(&specs, 500, 500, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, encode, ssl_update, collection);
criterion_main!(benches);
