use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use parkernel::linalg::{build_tridiagonal, mat_mul_sequential, DenseMatrix, TridiagonalSpec};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::hint::black_box;

fn random_square(n: usize, rng: &mut StdRng) -> DenseMatrix {
    DenseMatrix::new(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dense(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(42);
    let mut group = c.benchmark_group("mat_mul_dense");
    for n in [16, 64, 128, 256] {
        let a = random_square(n, &mut rng);
        let b = random_square(n, &mut rng);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bch, _| {
            bch.iter(|| mat_mul_sequential(black_box(&a), black_box(&b)).unwrap())
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bch, _| {
            bch.iter(|| parkernel::linalg::mat_mul_parallel(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

// the workflow's triple product at growing order
fn tridiagonal_chain(c: &mut Criterion) {
    let mut group = c.benchmark_group("triple_product");
    for n in [12, 64, 192] {
        let [m1, m2, m3] = [(1.2, 2.1), (2.6, 1.8), (2.0, 3.0)]
            .map(|(b, c)| build_tridiagonal(&TridiagonalSpec::new(n, 0.0, b, c)).unwrap());
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bch, _| {
            bch.iter(|| mat_mul_sequential(&mat_mul_sequential(&m1, &m2).unwrap(), &m3).unwrap())
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bch, _| {
            use parkernel::linalg::mat_mul_parallel;
            bch.iter(|| mat_mul_parallel(&mat_mul_parallel(&m1, &m2).unwrap(), &m3).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, dense, tridiagonal_chain);
criterion_main!(benches);
