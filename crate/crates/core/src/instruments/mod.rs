//! Instrument construction: characteristic-based instruments, recentered
//! shift-share and exact-prediction instruments, permutation recentering,
//! and the pass-through regression that scales the shock predictions.

mod characteristic;
mod recentered;

pub use characteristic::{blp_sum_iv, gh_differentiation_iv, pooled_characteristic_sd, GhVariant};
pub use recentered::{
    build_ssiv, fiv_prediction, recenter_by_permutation, ssiv_weights, ssiv_weights_at_delta,
    PermutationScope, SsivWeights,
};

use crate::error::{Error, Result};
use crate::mixedlogit::Market;
use nalgebra::{DMatrix, DVector};

/// Which construction produced an instrument block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstrumentKind {
    /// The demeaned cost shock itself, instrumenting only the price term.
    CostShock,
    /// Sums of rival characteristics.
    BlpSum,
    /// Sums of squared characteristic gaps to rivals.
    GhQuadratic,
    /// Counts of rivals inside a proximity threshold.
    GhLocal,
    /// Recentered first-order (shift-share) shock predictions.
    RecenteredShiftShare,
    /// Recentered exact-prediction formula values.
    RecenteredFormula,
}

impl InstrumentKind {
    /// Kinds built from realized shocks, which are only valid once recentered.
    pub fn requires_recentering(self) -> bool {
        matches!(self, InstrumentKind::RecenteredShiftShare | InstrumentKind::RecenteredFormula)
    }
}

/// How an instrument block was recentered, if at all.
#[derive(Debug, Clone, PartialEq)]
pub enum Recentering {
    /// Raw construction; fine when no shock realization enters the values.
    None,
    /// Demeaned against conditional shock means known by design.
    KnownMeans,
    /// Averaged over seeded shock-permutation counterfactuals.
    Permutation { count: usize, scope: PermutationScope, seed: u64 },
}

/// Preliminary parameter values a recentered construction was evaluated at.
#[derive(Debug, Clone, Default)]
pub struct Preliminary {
    pub alpha_check: Option<f64>,
    pub sigma_check: Option<DVector<f64>>,
    pub pi_check: Option<f64>,
}

/// One instrument block over a panel: a J x K matrix per market, all sharing
/// the same K, plus the metadata needed to reproduce the construction.
#[derive(Debug, Clone)]
pub struct InstrumentSet {
    pub kind: InstrumentKind,
    pub values: Vec<DMatrix<f64>>,
    pub preliminary: Preliminary,
    pub recentering: Recentering,
}

impl InstrumentSet {
    pub fn new(
        kind: InstrumentKind,
        values: Vec<DMatrix<f64>>,
        preliminary: Preliminary,
        recentering: Recentering,
    ) -> Result<Self> {
        let k = values
            .first()
            .map(|m| m.ncols())
            .ok_or_else(|| Error::InvalidInput("instrument set needs at least one market".into()))?;
        if values.iter().any(|m| m.ncols() != k) {
            return Err(Error::Dimension(
                "instrument column count differs across markets".into(),
            ));
        }
        if kind.requires_recentering() && recentering == Recentering::None {
            return Err(Error::InvalidInput(
                "shock-based instruments must record their recentering scheme".into(),
            ));
        }
        Ok(InstrumentSet { kind, values, preliminary, recentering })
    }

    pub fn columns(&self) -> usize {
        self.values[0].ncols()
    }
}

/// Estimated first-pass price response to the cost shocks.
#[derive(Debug, Clone)]
pub struct PassThrough {
    pub pi_check: f64,
    pub intercept: f64,
    /// Human-readable description of the fitting sample.
    pub fitted_on: String,
}

/// Ordinary least squares of within-region price changes on the late
/// period's cost shocks, with an intercept. The slope scales every shock
/// prediction downstream; its exact value is immaterial there, so no
/// standard error is kept.
pub fn estimate_pass_through(pairs: &[(&Market, &Market)]) -> Result<PassThrough> {
    let mut dp = Vec::new();
    let mut shock = Vec::new();
    for (early, late) in pairs {
        if early.products() != late.products() {
            return Err(Error::Dimension("paired markets disagree on product count".into()));
        }
        for j in 0..early.products() {
            dp.push(late.p[j] - early.p[j]);
            shock.push(late.g[j]);
        }
    }
    let n = dp.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "pass-through needs at least two paired products".into(),
        ));
    }
    let nf = n as f64;
    let shock_mean = shock.iter().sum::<f64>() / nf;
    let dp_mean = dp.iter().sum::<f64>() / nf;
    // A constant regressor must be rejected by its spread, not the centered
    // sum of squares: rounding the mean leaves deviations of order epsilon
    // that make the sum of squares positive.
    let (lo, hi) = shock
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = 1.0 + lo.abs().max(hi.abs());
    if !(hi - lo > 16.0 * f64::EPSILON * scale) {
        return Err(Error::InvalidInput(
            "cost shocks are numerically constant; pass-through is unidentified".into(),
        ));
    }
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dev = shock[i] - shock_mean;
        sxx += dev * dev;
        sxy += dev * (dp[i] - dp_mean);
    }
    let pi_check = sxy / sxx;
    if !pi_check.is_finite() {
        return Err(Error::NonFinite("pass-through slope".into()));
    }
    Ok(PassThrough {
        pi_check,
        intercept: dp_mean - pi_check * shock_mean,
        fitted_on: format!("{n} price changes across {} region pairs", pairs.len()),
    })
}
