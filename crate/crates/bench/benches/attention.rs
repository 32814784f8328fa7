use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use lan_bench::lasa_case;
use lan_core::attention::{lasa_forward, naive_global_attention, DEFAULT_TOKEN_CAP};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for n in [16, 32] {
        let (f, p) = lasa_case(16, n, n);
        group.bench_with_input(BenchmarkId::new("lasa", n), &n, |b, _| {
            b.iter(|| lasa_forward(black_box(&f), &p).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| {
            b.iter(|| naive_global_attention(black_box(&f), &p, DEFAULT_TOKEN_CAP).unwrap())
        });
    }
    let (f, p) = lasa_case(64, 64, 64);
    group.bench_function("lasa/64x64x64", |b| b.iter(|| lasa_forward(black_box(&f), &p).unwrap()));
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
