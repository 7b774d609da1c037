//! Recentered shock instruments: first-order (shift-share) weights built
//! from lagged data, exact forward predictions of the inversion's spread
//! gradient, and recentering by seeded shock permutations.

use crate::error::{Error, Result};
use crate::mixedlogit::{
    inversion_derivatives, inversion_derivatives_at_delta, inversion_sigma_gradient,
    ConsumerDraws, InversionDerivatives, Market, Theta,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// First-order shift-share weights for one market: per spread l, entry
/// (j, k) maps product k's demeaned cost shock into the sigma_l instrument
/// of product j. Built entirely from lagged shares and time-invariant
/// characteristics, so the weights are exogenous by construction.
#[derive(Debug, Clone)]
pub struct SsivWeights {
    /// One J x J block per random-coefficient spread.
    pub per_sigma: Vec<DMatrix<f64>>,
    /// Pass-through rate the weights (and the price column) scale by.
    pub pi_check: f64,
}

/// Differentiate the shift-share prediction at the lagged market: invert its
/// shares at the preliminary spreads, chain the spread-by-share cross block
/// of the inverse map through the share Jacobian, and scale by how strongly
/// shocks are predicted to move mean utilities. Nothing from the realized
/// period enters.
pub fn ssiv_weights(
    lagged: &Market,
    theta_check: &Theta,
    pi_check: f64,
    draws: &ConsumerDraws,
) -> Result<SsivWeights> {
    let blocks = inversion_derivatives(lagged, theta_check, draws)?;
    Ok(weights_from_blocks(&blocks, theta_check.alpha, pi_check))
}

/// [`ssiv_weights`] when the lagged market's mean utilities are already in
/// hand, skipping the inversion it would otherwise repeat.
pub fn ssiv_weights_at_delta(
    lagged_delta: &DVector<f64>,
    x1: &DMatrix<f64>,
    theta_check: &Theta,
    pi_check: f64,
    draws: &ConsumerDraws,
) -> Result<SsivWeights> {
    let blocks = inversion_derivatives_at_delta(lagged_delta, &theta_check.sigma, x1, draws)?;
    Ok(weights_from_blocks(&blocks, theta_check.alpha, pi_check))
}

fn weights_from_blocks(
    blocks: &InversionDerivatives,
    alpha_check: f64,
    pi_check: f64,
) -> SsivWeights {
    let scale = alpha_check * pi_check;
    let per_sigma = blocks
        .dcross
        .iter()
        .map(|dc| dc * &blocks.jacobian * scale)
        .collect();
    SsivWeights { per_sigma, pi_check }
}

/// Assemble the shift-share instrument matrix for one observed market:
/// column 0 instruments the price term with the negated, scaled demeaned
/// shock; column 1 + l contracts the sigma_l weight block with the demeaned
/// shocks.
pub fn build_ssiv(
    market: &Market,
    weights: &SsivWeights,
    shock_means: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let j_n = market.products();
    if shock_means.len() != j_n {
        return Err(Error::Dimension("one shock mean per product required".into()));
    }
    if weights.per_sigma.iter().any(|w| w.nrows() != j_n || w.ncols() != j_n) {
        return Err(Error::Dimension("weight blocks must be products x products".into()));
    }
    let g_tilde = &market.g - shock_means;
    let l1 = weights.per_sigma.len();
    let mut z = DMatrix::zeros(j_n, 1 + l1);
    z.set_column(0, &(&g_tilde * -weights.pi_check));
    for l in 0..l1 {
        z.set_column(1 + l, &(&weights.per_sigma[l] * &g_tilde));
    }
    Ok(z)
}

/// Exact-prediction instrument values for one market: the spread gradient of
/// the inverse share map, evaluated at the mean utilities the scaled shocks
/// are predicted to produce. Re-inverting the predicted shares would return
/// exactly the shifted utilities, so the gradient is evaluated there
/// directly and no inner inversion is run.
pub fn fiv_prediction(
    market: &Market,
    theta_check: &Theta,
    pi_check: f64,
    lagged_delta: &DVector<f64>,
    shocks: &DVector<f64>,
    draws: &ConsumerDraws,
) -> Result<DMatrix<f64>> {
    let j_n = market.products();
    if lagged_delta.len() != j_n || shocks.len() != j_n {
        return Err(Error::Dimension(
            "lagged utilities and shocks must cover every product".into(),
        ));
    }
    let shifted = lagged_delta + shocks * (theta_check.alpha * pi_check);
    inversion_sigma_gradient(&shifted, &theta_check.sigma, &market.x1, draws)
}

/// Where permutation counterfactuals reassign the shock values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationScope {
    /// Shuffle each market's shocks among its own products.
    WithinMarket,
    /// Shuffle the pooled shocks across every product and market.
    AcrossAll,
}

/// Recenter a shock-dependent construction by subtracting its average over
/// `count` seeded permutation counterfactuals: returns
/// values_fn(actual) - mean_c values_fn(counterfactual_c), one matrix per
/// market. Counterfactual assignments are generated sequentially from the
/// seed, then evaluated in parallel, so results never depend on thread
/// scheduling. `values_fn` must be pure.
pub fn recenter_by_permutation<F>(
    values_fn: F,
    actual: &[DVector<f64>],
    count: usize,
    scope: PermutationScope,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(&[DVector<f64>]) -> Result<Vec<DMatrix<f64>>> + Sync,
{
    if count == 0 {
        return Err(Error::InvalidInput(
            "permutation recentering needs at least one counterfactual".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let counterfactuals: Vec<Vec<DVector<f64>>> =
        (0..count).map(|_| permute_shocks(actual, scope, &mut rng)).collect();

    let mut base = values_fn(actual)?;
    let alternates: Vec<Vec<DMatrix<f64>>> = counterfactuals
        .par_iter()
        .map(|shocks| values_fn(shocks))
        .collect::<Result<_>>()?;

    let weight = 1.0 / count as f64;
    for alternate in &alternates {
        if alternate.len() != base.len() {
            return Err(Error::Dimension(
                "values_fn returned a different market count across calls".into(),
            ));
        }
    }
    for (m, out) in base.iter_mut().enumerate() {
        let mut mean = alternates[0][m].clone();
        for alternate in &alternates[1..] {
            mean += &alternate[m];
        }
        *out -= mean * weight;
    }
    Ok(base)
}

fn permute_shocks(
    actual: &[DVector<f64>],
    scope: PermutationScope,
    rng: &mut ChaCha12Rng,
) -> Vec<DVector<f64>> {
    match scope {
        PermutationScope::WithinMarket => actual
            .iter()
            .map(|g| {
                let mut values: Vec<f64> = g.iter().copied().collect();
                values.shuffle(rng);
                DVector::from_vec(values)
            })
            .collect(),
        PermutationScope::AcrossAll => {
            let mut pool: Vec<f64> = actual.iter().flat_map(|g| g.iter().copied()).collect();
            pool.shuffle(rng);
            let mut next = pool.into_iter();
            actual
                .iter()
                .map(|g| DVector::from_fn(g.len(), |_, _| next.next().expect("pool covers all")))
                .collect()
        }
    }
}
