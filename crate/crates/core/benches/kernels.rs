//! Kernel and forward-pass timings on one thread against the full rayon pool.
//!
//! Built without the `parallel` feature only the sequential loops are measured,
//! under the `sequential-build` label.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use lungseg::rng::keyed_rng;
use lungseg::tensor::conv2d;
use lungseg::unet::{Model, UNetConfig};
use lungseg::{Shape, Tensor};
use rand::Rng;

fn random(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = keyed_rng(&[seed]);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// (label, runner) pairs: each runner executes the closure in its thread setting.
#[cfg(feature = "parallel")]
fn settings() -> Vec<(String, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    let mut out = vec![("threads-1".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if all > 1 {
        out.push((format!("threads-{all}"), rayon::ThreadPoolBuilder::new().num_threads(all).build().unwrap()));
    }
    out
}

fn bench_with(c: &mut Criterion, group: &str, mut f: impl FnMut() + Send) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    for (label, pool) in settings() {
        g.bench_function(BenchmarkId::from_parameter(label), |b| b.iter(|| pool.install(&mut f)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::from_parameter("sequential-build"), |b| b.iter(&mut f));
    g.finish();
}

fn conv(c: &mut Criterion) {
    let x = random(Shape::new(4, 16, 64, 64), 1);
    let w = random(Shape::new(16, 16, 3, 3), 2);
    let bias = Tensor::zeros(Shape::new(1, 16, 1, 1));
    bench_with(c, "conv2d_4x16x64x64", || {
        black_box(conv2d(&x, &w, &bias).unwrap());
    });
}

fn forward(c: &mut Criterion) {
    let model = Model::<f32>::build(UNetConfig::new(3, 8), 0).unwrap();
    let x = random(Shape::new(2, 1, 64, 64), 3);
    bench_with(c, "unet_forward_l3_b8_2x64x64", || {
        black_box(model.forward(&x).unwrap());
    });
}

criterion_group!(benches, conv, forward);
criterion_main!(benches);
