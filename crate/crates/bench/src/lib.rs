//! Shared input builders for the kernel benchmarks.

use sagebwd::{gaussian_matrix, AttentionInputs, Rng};

/// Gaussian attention inputs with independent per-tensor streams.
pub fn bench_inputs(n: usize, d: usize, sigma: f64, seed: u64) -> AttentionInputs {
    let draw = |stream: u64, s: f64| {
        gaussian_matrix(n, d, s, &mut Rng::from_seed(Rng::derive_stream(seed, stream))).unwrap()
    };
    AttentionInputs::new(draw(0, sigma), draw(1, sigma), draw(2, 1.0), draw(3, 1.0)).unwrap()
}
