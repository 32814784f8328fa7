use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use lan_bench::randn;
use lan_core::data::SynthParams;
use lan_core::engine::kernels;
use lan_core::train::{DataSource, TrainConfig, Trainer};
use lan_core::{build_lan, LanConfig};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (ch, n) in [(8, 64), (32, 32), (64, 16)] {
        let x = randn(&[1, ch, n, n], 1);
        let w = randn(&[ch, ch, 3, 3], 2);
        let b = randn(&[ch], 3);
        group.bench_with_input(BenchmarkId::new("3x3", format!("{ch}ch-{n}px")), &n, |bench, _| {
            bench.iter(|| kernels::conv2d(black_box(&x), &w, Some(&b), 1, 1).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("lan");
    group.sample_size(10);
    let model = build_lan::<f32>(&LanConfig::preset("desk").unwrap()).unwrap();
    let x = randn(&[1, 3, 64, 64], 4);
    group.bench_function("forward/desk-64px", |b| {
        b.iter(|| model.forward(black_box(&x)).unwrap())
    });

    let mut cfg = TrainConfig::preset("desk").unwrap();
    cfg.data = DataSource::Synth {
        count: 1,
        size: 64,
        params: SynthParams::default(),
        seed: 0,
    };
    cfg.augment = false;
    let pair = cfg.data.load().unwrap().remove(0);
    let mut trainer = Trainer::<f32>::new(cfg).unwrap();
    group.bench_function("train_step/desk-64px", |b| {
        b.iter(|| trainer.train_step(black_box(&pair), 0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, network);
criterion_main!(benches);
