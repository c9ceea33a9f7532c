//! Kernel throughput under the active execution mode. Run twice to
//! compare modes:
//!
//! ```text
//! cargo bench -p drgrade-core
//! cargo bench -p drgrade-core --no-default-features
//! ```
//!
//! Bench IDs carry the mode so criterion keeps separate baselines.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drgrade_core::image::{AugmentConfig, FundusImage};
use drgrade_core::model::{BackboneConfig, Model};
use drgrade_core::tensor::{Padding, Tensor};

#[cfg(feature = "parallel")]
const MODE: &str = "parallel";
#[cfg(not(feature = "parallel"))]
const MODE: &str = "sequential";

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let len: usize = shape.iter().product();
    let data: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(data, shape).unwrap()
}

fn bench_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);

    let x = rand_tensor(&mut rng, &[8, 16, 32, 32]);
    let w = rand_tensor(&mut rng, &[32, 16, 3, 3]);
    c.bench_function(&format!("conv2d_same/{MODE}"), |b| {
        b.iter(|| black_box(&x).conv2d(black_box(&w), 1, Padding::Same).unwrap())
    });

    let a = rand_tensor(&mut rng, &[64, 512]);
    let wd = rand_tensor(&mut rng, &[512, 256]);
    c.bench_function(&format!("matmul/{MODE}"), |b| {
        b.iter(|| black_box(&a).matmul(black_box(&wd)).unwrap())
    });

    let model = Model::<f32>::init(BackboneConfig::desk_default(), 3, 42).unwrap();
    let batch = rand_tensor(&mut rng, &[4, 3, 64, 64]).relu();
    c.bench_function(&format!("model_forward/{MODE}"), |b| {
        b.iter(|| model.forward(black_box(&batch)).unwrap())
    });

    let pixels: Vec<f32> = (0..224 * 224 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = FundusImage::new(224, 224, pixels, "bench").unwrap();
    let aug = AugmentConfig::default();
    c.bench_function(&format!("augment/{MODE}"), |b| {
        b.iter(|| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            black_box(&img).augment(&aug, &mut r).unwrap()
        })
    });

    c.bench_function(&format!("clahe/{MODE}"), |b| {
        b.iter(|| black_box(&img).clahe((8, 8), 2.0).unwrap())
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = bench_kernels
}
criterion_main!(kernels);
