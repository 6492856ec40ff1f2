use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use geolle_core::fusion::{hdgffm_forward, FusionVariant, HdgffmParams};
use geolle_core::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use geolle_core::Tensor;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for (cin, cout, hw) in [(8, 8, 64), (16, 16, 32), (32, 32, 16), (24, 8, 64)] {
        let g = ConvGeom::new((8, cin, hw, hw), (cout, 3, 3), 1, 1).unwrap();
        let x: Vec<f32> = (0..8 * cin * hw * hw)
            .map(|i| (i % 31) as f32 / 31.0)
            .collect();
        let w: Vec<f32> = (0..cout * cin * 9)
            .map(|i| ((i % 7) as f32 - 3.0) * 0.05)
            .collect();
        let b = vec![0.0f32; cout];
        let y = conv2d_forward(&x, &w, Some(&b), &g);
        let id = format!("{cin}x{cout}@{hw}");
        group.throughput(Throughput::Elements(
            (2 * 8 * cin * cout * 9 * hw * hw) as u64,
        ));
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |bch, _| {
            bch.iter(|| conv2d_forward(black_box(&x), black_box(&w), Some(&b), &g))
        });
        group.bench_with_input(BenchmarkId::new("backward", &id), &(), |bch, _| {
            bch.iter(|| conv2d_backward(black_box(&x), black_box(&w), black_box(&y), &g, true))
        });
    }
    group.finish();
}

fn fusion_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("fusion_block");
    for (ch, hw) in [(8, 64), (16, 32), (32, 16)] {
        let p = HdgffmParams::<f32>::random(ch, ch, FusionVariant::Gated, true, 1, 1.0)
            .with_tau(1.0 / hw as f64);
        let img = Tensor::<f32>::from_fn(vec![8, ch, hw, hw], |i| ((i % 13) as f32 - 6.0) * 0.1);
        let depth = Tensor::<f32>::from_fn(vec![8, ch, hw, hw], |i| ((i % 11) as f32 - 5.0) * 0.1);
        group.bench_function(format!("forward {ch}@{hw}"), |b| {
            b.iter(|| hdgffm_forward(black_box(&img), black_box(&depth), &p).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, fusion_block);
criterion_main!(benches);
