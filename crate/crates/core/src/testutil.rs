//! Fixtures shared across unit tests.

use crate::mixedlogit::ConsumerDraws;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

/// Standardized skewed draws: shifted exponentials made exactly mean-zero,
/// unit-variance and pairwise uncorrelated (Gram-Schmidt across columns).
/// Exact first and second moments make small-spread expansion coefficients
/// exact under the draw measure; the nonzero third moment keeps odd-order
/// error terms from cancelling by symmetry the way they would with Gaussian
/// draws.
pub(crate) fn standardized_skewed_draws(r: usize, l1: usize, seed: u64) -> ConsumerDraws {
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut nu = DMatrix::zeros(r, l1);
    for l in 0..l1 {
        for i in 0..r {
            let u: f64 = rng.gen_range(1e-12..1.0);
            nu[(i, l)] = -u.ln();
        }
        let mean = nu.column(l).mean();
        for i in 0..r {
            nu[(i, l)] -= mean;
        }
        for prev in 0..l {
            let proj = nu.column(l).dot(&nu.column(prev)) / nu.column(prev).norm_squared();
            for i in 0..r {
                nu[(i, l)] -= proj * nu[(i, prev)];
            }
        }
        let sd = (nu.column(l).norm_squared() / r as f64).sqrt();
        for i in 0..r {
            nu[(i, l)] /= sd;
        }
    }
    ConsumerDraws::from_matrix(nu)
}
