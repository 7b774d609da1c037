//! GMM estimation of the demand parameters.
//!
//! Three procedures share this module: a levels estimator on the late
//! period with characteristic-based instruments ([`estimate_char_iv`]),
//! a continuously-updating first-difference estimator whose recentered
//! shock instruments are rebuilt at every trial parameter
//! ([`estimate_cu_recentered`]), and an iterative variant that freezes the
//! instruments between outer steps so the price coefficient can be
//! concentrated out ([`estimate_iterative_recentered`]). Every system is
//! just identified: as many moments as free parameters, counts asserted at
//! construction.
//!
//! All numerical searches run in an unconstrained space: spreads pass
//! through [`softplus`] and the price coefficient through its negative,
//! so `sigma_hat >= 0` always and `alpha_hat < 0` wherever alpha is
//! searched over rather than concentrated. Each search starts from the
//! best of 50 low-discrepancy grid points, takes Gauss-Newton steps, and
//! falls back to a quasi-Newton minimization of the objective from the
//! same start when Gauss-Newton stalls or leaves a large gradient.

mod chariv;
mod infer;
mod recentered;

pub use chariv::estimate_char_iv;
pub use infer::{
    aggregate_shock_residuals, clustered_standard_errors, gmm_standard_errors, Clustering,
    FittedMoments, ShockAggregation, ShockLevelPieces, StandardErrors,
};
pub use recentered::{
    estimate_cu_recentered, estimate_cu_recentered_with, estimate_iterative_recentered,
    estimate_iterative_recentered_from,
};

use crate::error::{Error, Result};
use crate::mixedlogit::{ConsumerDraws, Market, Theta};
use crate::solvers::{rd_grid, OptimizerReport};
use nalgebra::{DMatrix, DVector};

/// Sample the moment conditions average over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentStyle {
    /// Levels of every period past the first: xi = D(s; sigma) - alpha p - beta'x.
    LevelsPeriod2,
    /// Within-region adjacent-period differences: delta xi = dD(sigma) - alpha dp.
    FirstDifferences,
}

/// Weighting-matrix convention. Just-identified systems make the weight
/// irrelevant for the estimand; it only shapes the optimization path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightStyle {
    /// Inverse of the instrument cross-product, (Z'Z / N)^{-1}.
    ZwzInverse,
    /// Identity, so instruments that change with theta need no re-weighting.
    Identity,
}

/// Characteristic-based instrument flavor for the levels estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CharIvKind {
    /// Sums of rival characteristics.
    BlpSum,
    /// Sums of squared characteristic gaps to rivals.
    GhQuadratic,
    /// Counts of rivals within a proximity threshold.
    GhLocal,
}

/// Recentered shock-instrument flavor for the first-difference estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecenteredIvKind {
    /// First-order shift-share predictions built on lagged shares.
    ShiftShare,
    /// Exact predictions recentered over shock permutations.
    ExactPrediction,
}

/// A panel prepared for estimation: the markets, the simulation draws the
/// share integrals use, and the moment/weight conventions of the procedure
/// that will consume it.
#[derive(Debug, Clone)]
pub struct GmmProblem<'a> {
    pub markets: &'a [Market],
    pub draws: &'a ConsumerDraws,
    pub moment_style: MomentStyle,
    pub weight_style: WeightStyle,
}

impl<'a> GmmProblem<'a> {
    /// Configuration of the characteristic-IV levels estimator.
    pub fn characteristic(markets: &'a [Market], draws: &'a ConsumerDraws) -> Self {
        GmmProblem {
            markets,
            draws,
            moment_style: MomentStyle::LevelsPeriod2,
            weight_style: WeightStyle::ZwzInverse,
        }
    }

    /// Configuration of the recentered first-difference estimators.
    pub fn recentered(markets: &'a [Market], draws: &'a ConsumerDraws) -> Self {
        GmmProblem {
            markets,
            draws,
            moment_style: MomentStyle::FirstDifferences,
            weight_style: WeightStyle::Identity,
        }
    }

    /// Markets past the first period, in input order: the levels sample.
    pub(crate) fn level_markets(&self) -> Result<Vec<&'a Market>> {
        let late: Vec<&Market> = self.markets.iter().filter(|m| m.period >= 2).collect();
        if late.is_empty() {
            return Err(Error::MissingData(
                "levels estimation needs markets past the first period".into(),
            ));
        }
        Ok(late)
    }

    /// Adjacent-period pairs (previous, current) for every market past the
    /// first period, in input order of the current market.
    pub(crate) fn adjacent_pairs(&self) -> Result<Vec<(&'a Market, &'a Market)>> {
        let mut pairs = Vec::new();
        for late in self.markets.iter().filter(|m| m.period >= 2) {
            let early = self
                .markets
                .iter()
                .find(|m| m.region == late.region && m.period == late.period - 1);
            match early {
                Some(early) => pairs.push((early, late)),
                None => {
                    return Err(Error::MissingData(format!(
                        "region {} period {} has no preceding period",
                        late.region, late.period
                    )))
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::MissingData(
                "first-difference estimation needs adjacent-period pairs".into(),
            ));
        }
        Ok(pairs)
    }
}

/// One outer step of the iterative estimator: the accepted parameters, how
/// far the spreads moved, and the inner search's report.
#[derive(Debug, Clone)]
pub struct OuterStep {
    pub theta: Theta,
    pub sigma_step_norm: f64,
    pub inner: OptimizerReport,
}

/// Output of one estimation run.
#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub theta_hat: Theta,
    /// Linear taste coefficients; concentrated out on the levels path only.
    pub beta_hat: Option<DVector<f64>>,
    pub report: OptimizerReport,
    pub objective_value: f64,
    /// Best grid point the search started from: the spreads, plus the
    /// price coefficient on paths that search over it.
    pub grid_start: DVector<f64>,
    pub se: Option<StandardErrors>,
    pub wall_time: std::time::Duration,
    /// Moment-level pieces at the solution; `None` when both optimizers
    /// failed and no solution worth differentiating exists.
    pub fitted: Option<FittedMoments>,
    /// Outer-iteration log (iterative estimator only).
    pub outer: Option<Vec<OuterStep>>,
}

/// Strictly positive map log(1 + exp(v)), overflow-safe at both ends.
pub fn softplus(untransformed: f64) -> f64 {
    if untransformed > 30.0 {
        // log(1+e^v) = v + log(1+e^-v); the correction underflows past ~36.
        untransformed + (-untransformed).exp().ln_1p()
    } else {
        untransformed.exp().ln_1p()
    }
}

/// Derivative of [`softplus`]: the logistic function exp(v)/(1+exp(v)).
pub fn softplus_derivative(untransformed: f64) -> f64 {
    if untransformed >= 0.0 {
        1.0 / (1.0 + (-untransformed).exp())
    } else {
        let e = untransformed.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] on positive inputs: log(exp(s) - 1). Zero maps
/// to negative infinity, matching the softplus limit.
pub fn softplus_inverse(positive: f64) -> f64 {
    if positive > 30.0 {
        positive
    } else {
        positive.exp_m1().ln()
    }
}

/// Concentrated linear IV-GMM coefficients: the phi solving
/// min_phi (Z'(d - X phi))' W (Z'(d - X phi)), that is
/// phi = (X'Z W Z'X)^{-1} X'Z W Z'd.
pub fn concentrate_linear(
    outcome: &DVector<f64>,
    design: &DMatrix<f64>,
    instruments: &DMatrix<f64>,
    weight: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let n = outcome.len();
    let q = instruments.ncols();
    if design.nrows() != n || instruments.nrows() != n {
        return Err(Error::Dimension(format!(
            "outcome has {n} rows, design {} and instruments {}",
            design.nrows(),
            instruments.nrows()
        )));
    }
    if q < design.ncols() {
        return Err(Error::Dimension(format!(
            "{q} instruments cannot identify {} coefficients",
            design.ncols()
        )));
    }
    if weight.nrows() != q || weight.ncols() != q {
        return Err(Error::Dimension("weight must be instruments-by-instruments".into()));
    }
    let a = instruments.transpose() * design;
    let v = instruments.transpose() * outcome;
    let normal = a.transpose() * weight * &a;
    let rhs = a.transpose() * (weight * v);
    normal
        .lu()
        .solve(&rhs)
        .filter(|phi| phi.iter().all(|c| c.is_finite()))
        .ok_or_else(|| Error::RankDeficient("projected design X'ZWZ'X singular".into()))
}

/// Number of low-discrepancy grid points every search stage evaluates.
pub(crate) const GRID_POINTS: usize = 50;
/// Upper edge of the spread search box; the lower edge is zero.
pub(crate) const SIGMA_BOX: f64 = 10.0;
/// Step budget for one Gauss-Newton run.
pub(crate) const MAX_GN_ITERATIONS: usize = 100;
/// Step budget for the quasi-Newton fallback.
pub(crate) const MAX_QN_ITERATIONS: usize = 500;
/// Objective value standing in for a trial point whose evaluation failed
/// recoverably; finite so line searches can back away from it.
pub(crate) const SOFT_FAILURE_OBJECTIVE: f64 = 1e100;

/// Spread grid: low-discrepancy points over [0, SIGMA_BOX]^dims.
pub(crate) fn sigma_grid(dims: usize) -> Result<Vec<DVector<f64>>> {
    let lower = DVector::zeros(dims);
    let upper = DVector::from_element(dims, SIGMA_BOX);
    let grid = rd_grid(GRID_POINTS, dims, &lower, &upper)?;
    Ok((0..grid.nrows()).map(|i| grid.row(i).transpose()).collect())
}

/// Cache key for a spread vector: exact bit patterns, so only evaluations
/// at the identical point are shared.
pub(crate) fn sigma_key(sigma: &DVector<f64>) -> Vec<u64> {
    sigma.iter().map(|v| v.to_bits()).collect()
}

/// Maps recoverable trial-point failures (a share inversion that stalled, a
/// singular or untrustworthy derivative) to a huge finite objective so the
/// surrounding search can retreat; structural errors propagate.
pub(crate) fn soft_objective(err: Error) -> Result<f64> {
    match err {
        Error::NonConvergence(_)
        | Error::Diverged { .. }
        | Error::NonFinite(_)
        | Error::RankDeficient(_)
        | Error::IllConditioned(..) => Ok(SOFT_FAILURE_OBJECTIVE),
        structural => Err(structural),
    }
}

/// True when a trial-point failure should be skipped rather than raised.
pub(crate) fn is_recoverable(err: &Error) -> bool {
    matches!(
        err,
        Error::NonConvergence(_)
            | Error::Diverged { .. }
            | Error::NonFinite(_)
            | Error::RankDeficient(_)
            | Error::IllConditioned(..)
    )
}
