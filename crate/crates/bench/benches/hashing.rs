use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use superbloom_core::hashing::{build_random_scheme, VocabSpec};

fn bench_scheme_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_random_scheme");
    group.sample_size(10);
    for &(n, alpha) in &[(10_000u32, 20u32), (100_000, 50)] {
        let spec = VocabSpec::new(n, &["MASK", "PAD"]).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(build_random_scheme(&spec, 2, alpha, 7).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_scheme_build);
criterion_main!(benches);
