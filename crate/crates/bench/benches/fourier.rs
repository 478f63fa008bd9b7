use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geomlens_core::fourier::{dct2, gram, thm1_verify};
use geomlens_core::synthetic::smooth_curve_basis;
use geomlens_core::PositionalBasisMatrix;

fn bench_fourier(c: &mut Criterion) {
    let mut group = c.benchmark_group("fourier");
    for &t in &[128usize, 512] {
        let pb = PositionalBasisMatrix::new(smooth_curve_basis(t, 64, 4, 3).unwrap());
        group.bench_with_input(BenchmarkId::new("gram", t), &pb, |b, pb| b.iter(|| gram(pb).unwrap()));
        let g = gram(&pb).unwrap().g;
        group.bench_with_input(BenchmarkId::new("dct2", t), &g, |b, g| b.iter(|| dct2(g, &[1, 3, 5, 10]).unwrap()));
        group.bench_with_input(BenchmarkId::new("thm1", t), &pb, |b, pb| b.iter(|| thm1_verify(pb, 8, 2).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_fourier);
criterion_main!(benches);
