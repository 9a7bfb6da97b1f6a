//! Shared fixtures for the criterion benchmarks.

use superbloom_core::hashing::{build_random_scheme, HashScheme, VocabSpec};
use superbloom_core::inference::random_prediction;

pub fn bench_scheme(n: u32, alpha: u32) -> HashScheme {
    let spec = VocabSpec::new(n, &["MASK", "PAD"]).expect("vocab spec");
    build_random_scheme(&spec, 2, alpha, 1).expect("scheme")
}

pub fn bench_predictions(scheme: &HashScheme, queries: usize) -> Vec<Vec<Vec<f64>>> {
    (0..queries)
        .map(|q| {
            random_prediction(
                scheme.num_hashes(),
                scheme.hash_size() as usize,
                6.0,
                q as u64,
            )
        })
        .collect()
}
