//! Shared fixtures for the criterion benchmarks.

use qsampler_core::PotentialModel;

/// Finite-sum quadratic used by the sampler and estimator benchmarks.
pub fn bench_model(d: usize, n: usize) -> PotentialModel {
    PotentialModel::finite_sum_quadratic(d, n, 1.0, 7, 0.0).expect("valid model")
}
