use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use kvcomp_bench::fixture;
use kvcomp_core::policies::{Policy, PolicyKind};
use kvcomp_core::PolicyParams;

fn bench_prefill(c: &mut Criterion) {
    let mut g = c.benchmark_group("prefill");
    g.sample_size(20);
    for n in [128, 512] {
        let f = fixture(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| f.model.prefill(black_box(&f.prompt)).unwrap()));
    }
    g.finish();
}

fn bench_policies(c: &mut Criterion) {
    let f = fixture(512);
    let trace = f.model.prefill(&f.prompt).unwrap().trace;
    let params = PolicyParams::default();
    let mut g = c.benchmark_group("policy/512/budget64");
    for kind in PolicyKind::ALL {
        let policy = Policy::from_kind(kind, Some(&f.table)).unwrap();
        g.bench_function(kind.name(), |b| b.iter(|| policy.decide_all(black_box(&trace), &[64, 64], &params).unwrap()));
    }
    g.finish();
}

fn bench_decode(c: &mut Criterion) {
    let f = fixture(512);
    let pre = f.model.prefill(&f.prompt).unwrap();
    let policy = Policy::from_kind(PolicyKind::CompressKv, Some(&f.table)).unwrap();
    let mut evicted = pre.cache.clone();
    for d in policy.decide_all(&pre.trace, &[64, 64], &PolicyParams::default()).unwrap() {
        evicted.apply_eviction(&d).unwrap();
    }
    let x = f.prompt.row(0).to_vec();
    let mut g = c.benchmark_group("decode_step/512");
    g.bench_function("full", |b| b.iter_batched(|| pre.cache.clone(), |mut cache| f.model.decode_step(&mut cache, &x).unwrap(), criterion::BatchSize::LargeInput));
    g.bench_function("budget64", |b| b.iter_batched(|| evicted.clone(), |mut cache| f.model.decode_step(&mut cache, &x).unwrap(), criterion::BatchSize::LargeInput));
    g.finish();
}

criterion_group!(benches, bench_prefill, bench_policies, bench_decode);
criterion_main!(benches);
