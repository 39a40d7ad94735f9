//! Parallel-vs-sequential comparison for the data-parallel inner loops.
//!
//! Run with `cargo bench -p pvad`. The `parallel` feature must be on (it is
//! by default); the sequential path is always compiled, so both variants are
//! measured in one binary.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pvad::tensor::{matmul, matmul_seq, Tensor};

fn rand_tensor(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|i| {
                let h = (i as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ salt;
                (h % 2000) as f32 / 1000.0 - 1.0
            })
            .collect(),
    )
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    group.sample_size(20);
    for &(m, k, n) in &[(128usize, 512usize, 64usize), (256, 256, 256)] {
        let a = rand_tensor(&[m, k], 1);
        let b = rand_tensor(&[k, n], 2);
        group.bench_with_input(
            BenchmarkId::new("rayon", format!("{m}x{k}x{n}")),
            &(&a, &b),
            |bch, (a, b)| bch.iter(|| matmul(a, b)),
        );
        group.bench_with_input(
            BenchmarkId::new("seq", format!("{m}x{k}x{n}")),
            &(&a, &b),
            |bch, (a, b)| bch.iter(|| matmul_seq(a, b)),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_matmul);
criterion_main!(benches);
