use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use caudr::spectrum::{dct_decompose, idct_reconstruct};
use caudr::tensor::Tape;
use caudr::train::{train, TrainConfig};
use caudr_bench::{random_image, random_tensor, small_benchmark};

fn transform(c: &mut Criterion) {
    let img = random_image(64, 1);
    let spec = dct_decompose(&img).unwrap();
    c.bench_function("dct_decompose 64x64", |b| {
        b.iter(|| dct_decompose(black_box(&img)).unwrap())
    });
    c.bench_function("idct_reconstruct 64x64", |b| {
        b.iter(|| idct_reconstruct(black_box(&spec)).unwrap())
    });
    let big = random_image(448, 2);
    c.bench_function("dct_decompose 448x448", |b| {
        b.iter(|| dct_decompose(black_box(&big)).unwrap())
    });
}

fn convolution(c: &mut Criterion) {
    let x = random_tensor(&[32, 64, 8, 8], 3);
    let w = random_tensor(&[64, 64, 3, 3], 4);
    c.bench_function("conv2d 3x3 forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv2d(xv, wv, 1, 1).unwrap();
            let s = tape.mean_all(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn training(c: &mut Criterion) {
    let (data, split) = small_benchmark(8);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    for p_do in [0.0, 1.0] {
        let cfg = TrainConfig {
            steps: 5,
            p_do,
            ..TrainConfig::desk()
        };
        group.bench_function(format!("5 steps, p_do {p_do}"), |b| {
            b.iter(|| black_box(train(&cfg, &split, &data).unwrap().log.len()))
        });
    }
    group.finish();
}

criterion_group!(benches, transform, convolution, training);
criterion_main!(benches);
