//! Wall-clock comparison of the execution paths the width budget reasons
//! about: ungated dense forwards, sliced/gathered routed forwards, and the
//! gather/scatter primitives underneath token skipping.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};

use dydit_bench::{bench_image, half_widths, protection, routed_model};
use dydit_core::dit::WidthKind;
use dydit_core::numerics::BroadcastAxis;
use dydit_core::{Tape, Tensor};

fn model_forward(c: &mut Criterion) {
    let model = routed_model(7);
    let prot = protection(&model);
    let image = bench_image(11);
    let mut group = c.benchmark_group("model_forward");

    group.bench_function("static_full", |b| {
        let tape = Tape::off();
        b.iter(|| {
            let out = model
                .forward_full(&tape, black_box(&image), 50, 1)
                .unwrap();
            black_box(out.data()[0])
        })
    });

    // Width routing plus slicing happens once per timestep in the sampler,
    // so it is priced outside the iteration: this measures the per-image
    // cost a precompiled schedule pays.
    let widths = model.resolve_widths(50, WidthKind::Routed(&prot)).unwrap();
    let sliced = model.slice_blocks(&widths).unwrap();
    group.bench_function("routed_presliced", |b| {
        b.iter(|| {
            let out = model
                .forward_sliced(black_box(&sliced), black_box(&image), 50, 1)
                .unwrap();
            black_box(out.pred[0])
        })
    });

    let half = model.slice_blocks(&half_widths(&model)).unwrap();
    group.bench_function("half_width_presliced", |b| {
        b.iter(|| {
            let out = model
                .forward_sliced(black_box(&half), black_box(&image), 50, 1)
                .unwrap();
            black_box(out.pred[0])
        })
    });

    group.bench_function("route_and_slice_only", |b| {
        b.iter(|| {
            let w = model
                .resolve_widths(black_box(50), WidthKind::Routed(&prot))
                .unwrap();
            black_box(model.slice_blocks(&w).unwrap().len())
        })
    });
    group.finish();
}

fn gather_scatter(c: &mut Criterion) {
    let rows = 256;
    let cols = 64;
    let x = Tensor::from_vec(
        &[rows, cols],
        dydit_core::rng::seeded_standard_normal(3, rows * cols),
    )
    .unwrap();
    let keep: Vec<bool> = (0..rows).map(|i| i % 2 == 0).collect();
    let mask_rows = Tensor::from_vec(
        &[rows, 1],
        keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let tape = Tape::off();
    let mut group = c.benchmark_group("token_skip");

    group.bench_function("gather_then_scatter_half", |b| {
        let zeros = Tensor::zeros(&[rows, cols]).unwrap();
        b.iter(|| {
            let g = tape.gather_rows(black_box(&x), &keep).unwrap();
            let s = tape.scatter_rows(&g, &zeros, &keep).unwrap();
            black_box(s.data()[0])
        })
    });

    group.bench_function("dense_row_mask", |b| {
        b.iter(|| {
            let m = tape
                .broadcast(&mask_rows, rows, cols, BroadcastAxis::Rows)
                .unwrap();
            let s = tape.mul(black_box(&x), &m).unwrap();
            black_box(s.data()[0])
        })
    });
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let tape = Tape::off();
    let mut group = c.benchmark_group("matmul_square");
    for n in [64usize, 128] {
        let a = Tensor::from_vec(&[n, n], dydit_core::rng::seeded_standard_normal(5, n * n))
            .unwrap();
        let b_ = Tensor::from_vec(&[n, n], dydit_core::rng::seeded_standard_normal(6, n * n))
            .unwrap();
        group.bench_function(format!("{n}"), |b| {
            b.iter(|| {
                let y = tape.matmul(black_box(&a), black_box(&b_)).unwrap();
                black_box(y.data()[0])
            })
        });
    }
    group.finish();
}

fn configured() -> Criterion {
    Criterion::default()
        .warm_up_time(Duration::from_millis(300))
        .measurement_time(Duration::from_millis(1200))
        .sample_size(30)
}

criterion_group! {
    name = benches;
    config = configured();
    targets = model_forward, gather_scatter, matmul
}
criterion_main!(benches);
