//! Criterion benchmarks for the hot kernels: convolution, routing, soft
//! encoding, and a whole-network forward pass at the reduced size.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use tucan_core::capsule::{route, VoteProjection, ROUTING_ITERATIONS};
use tucan_core::colorspace::{soft_encode_sparse, BinTable, SOFT_ENCODE_K, SOFT_ENCODE_SIGMA};
use tucan_core::net::Level;
use tucan_core::nn::Conv2d;
use tucan_core::{NetworkConfig, TucanNet};

fn conv_forward(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    // The padded 3x3 shape the deeper encoder blocks run at full scale.
    let mut conv = Conv2d::new(&mut rng, 128, 256, 3, 1, 1);
    let x = Array4::from_shape_fn((1, 128, 28, 28), |_| rng.random_range(-1.0..1.0));
    c.bench_function("conv3x3_128to256_28px", |b| {
        b.iter(|| black_box(conv.forward(black_box(&x), false)))
    });
}

fn routing(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    // Full-scale bottleneck: 225 primary capsules vote for 32 entities in 16d.
    let votes = Array3::from_shape_fn((225, 32, 16), |_| rng.random_range(-1.0..1.0));
    c.bench_function("routing_225x32x16", |b| {
        b.iter(|| black_box(route(black_box(&votes), ROUTING_ITERATIONS)))
    });

    let proj = VoteProjection::new(&mut rng, 225, 32, 8, 16);
    let u = ndarray::Array2::from_shape_fn((225, 8), |_| rng.random_range(-1.0..1.0));
    c.bench_function("vote_projection_225x8to32x16", |b| {
        b.iter(|| black_box(proj.forward(black_box(&u))))
    });
}

fn soft_encode(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let bins = BinTable::canonical();
    let ab = Array3::from_shape_fn((2, 64, 64), |_| rng.random_range(-60.0..60.0));
    c.bench_function("soft_encode_64px", |b| {
        b.iter(|| black_box(soft_encode_sparse(black_box(&ab), bins, SOFT_ENCODE_SIGMA, SOFT_ENCODE_K)))
    });
}

fn toy_forward(c: &mut Criterion) {
    let mut net = TucanNet::new(NetworkConfig::toy(313), 4).unwrap();
    let x = Array4::from_shape_fn((1, 1, 64, 64), |(_, _, y, x)| {
        ((x * 13 + y * 7) % 97) as f64 / 97.0
    });
    let mut g = c.benchmark_group("network");
    g.sample_size(20);
    g.bench_function("toy_forward_64px", |b| {
        b.iter(|| black_box(net.forward(black_box(&x), Level::Final, false)))
    });
    g.finish();
}

criterion_group!(kernels, conv_forward, routing, soft_encode, toy_forward);
criterion_main!(kernels);
