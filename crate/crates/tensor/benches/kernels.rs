//! Sequential vs rayon throughput of the hot kernels. Run with
//! `cargo bench -p bvc-tensor`; building with `--no-default-features`
//! drops the rayon rows entirely.

use bvc_tensor::kernels::{self, ConvGeom};
use bvc_tensor::par;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn ramp(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect()
}

fn modes() -> Vec<(&'static str, bool)> {
    if cfg!(feature = "parallel") {
        vec![("sequential", false), ("rayon", true)]
    } else {
        vec![("sequential", false)]
    }
}

fn bench_conv(c: &mut Criterion) {
    let g = ConvGeom { cin: 48, h: 64, w: 64, cout: 48, k: 3, stride: 1, pad: 1 };
    let x = ramp(g.cin * g.h * g.w);
    let w = ramp(g.cout * g.cin * 9);
    let gy = ramp(g.cout * g.h * g.w);
    let mut group = c.benchmark_group("conv3x3_48ch_64px");
    for (name, on) in modes() {
        par::set_parallel(on);
        group.bench_with_input(BenchmarkId::new("forward", name), &(), |b, _| {
            b.iter(|| kernels::conv2d_forward(black_box(&x), &w, None, &g))
        });
        group.bench_with_input(BenchmarkId::new("backward", name), &(), |b, _| {
            b.iter(|| kernels::conv2d_backward(black_box(&x), &w, &gy, &g, true, true, true))
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn bench_warp(c: &mut Criterion) {
    let (ch, h, w) = (48, 64, 64);
    let feat = ramp(ch * h * w);
    let flow: Vec<f32> = ramp(2 * h * w).iter().map(|v| v * 6.0).collect();
    let gy = ramp(ch * h * w);
    let mut group = c.benchmark_group("warp_48ch_64px");
    for (name, on) in modes() {
        par::set_parallel(on);
        group.bench_with_input(BenchmarkId::new("forward", name), &(), |b, _| {
            b.iter(|| kernels::warp_forward(black_box(&feat), &flow, ch, h, w))
        });
        group.bench_with_input(BenchmarkId::new("backward", name), &(), |b, _| {
            b.iter(|| kernels::warp_backward(black_box(&feat), &flow, &gy, ch, h, w, true, true))
        });
    }
    group.finish();
    par::set_parallel(true);
}

fn bench_laplace(c: &mut Criterion) {
    let n = 96 * 16 * 16;
    let x: Vec<f32> = ramp(n).iter().map(|v| (v * 20.0).round()).collect();
    let mu = ramp(n);
    let b: Vec<f32> = ramp(n).iter().map(|v| v.abs() + 0.1).collect();
    let mut group = c.benchmark_group("laplace_bits_24k");
    for (name, on) in modes() {
        par::set_parallel(on);
        group.bench_with_input(BenchmarkId::from_parameter(name), &(), |bch, _| {
            bch.iter(|| kernels::laplace_bits(black_box(&x), &mu, &b, 1.0 / 65536.0))
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, bench_conv, bench_warp, bench_laplace);
criterion_main!(benches);
