use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lmsf_bench::{input, models};
use lmsf_core::OutStride;

fn forward(c: &mut Criterion) {
    let (train, deploy) = models(320);
    let x = input(train.input_shape(), 4);
    let mut g = c.benchmark_group("forward_320");
    g.sample_size(10);
    g.bench_function("train", |b| {
        b.iter(|| train.forward(black_box(&x), OutStride::S1).unwrap())
    });
    g.bench_function("deploy", |b| {
        b.iter(|| deploy.forward(black_box(&x), OutStride::S1).unwrap())
    });
    g.finish();

    let blocks: Vec<_> = train.backbone.blocks().zip(deploy.backbone.blocks()).collect();
    let shapes = train.backbone.block_inputs(320);
    let mut g = c.benchmark_group("c2f_block_320");
    for (i, ((t, d), shape)) in blocks.into_iter().zip(shapes).enumerate() {
        let x = input(shape, 5);
        g.bench_function(format!("stage{i}_train"), |b| {
            b.iter(|| t.forward(black_box(&x)).unwrap())
        });
        g.bench_function(format!("stage{i}_deploy"), |b| {
            b.iter(|| d.forward(black_box(&x)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
