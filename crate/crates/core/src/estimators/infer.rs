//! Inference for the fitted moment systems: shock-level residual
//! aggregation and clustered sandwich standard errors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::EstimationResult;

/// How the moment covariance is clustered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clustering {
    /// One cluster per market; products within a market may be arbitrarily
    /// dependent.
    ByMarket,
    /// One cluster per (product, market) shock, treating the shocks as the
    /// independent units. Available only when every moment row is linear in
    /// the shocks with known weights.
    ByShock,
}

/// Standard errors together with the clustering that produced them.
#[derive(Debug, Clone)]
pub struct StandardErrors {
    pub clustering: Clustering,
    pub values: DVector<f64>,
}

/// Everything inference needs from a solved moment system, frozen at the
/// solution.
#[derive(Debug, Clone)]
pub struct FittedMoments {
    /// Column order of the jacobian and of any standard-error vector.
    pub parameter_names: Vec<String>,
    /// Per-observation moment contributions z_i * resid_i, one row each.
    pub contributions: DMatrix<f64>,
    /// Market index of each contribution row.
    pub cluster: Vec<usize>,
    /// Derivative of the averaged moments in the parameters, natural
    /// (untransformed) coordinates, moments by parameters.
    pub jacobian: DMatrix<f64>,
    pub weight: DMatrix<f64>,
    /// Shift-share decomposition of the moment rows, where one exists.
    pub shock_level: Option<ShockLevelPieces>,
}

/// Shift-share decomposition of fitted moments: per market, one
/// products-by-products weight block per moment row, with the shocks and
/// residuals the moments contract. Row `row` of the moments satisfies
/// sum_j z_jm resid_jm = sum_k shock_km * (weights[row]' resid)_km.
#[derive(Debug, Clone)]
pub struct ShockLevelPieces {
    pub weights: Vec<Vec<DMatrix<f64>>>,
    pub shocks: Vec<DVector<f64>>,
    pub residuals: Vec<DVector<f64>>,
}

/// Residuals aggregated to the shock level.
#[derive(Debug, Clone)]
pub struct ShockAggregation {
    /// Per market: entry (k, row) collects every residual product k's shock
    /// reaches through moment row `row`, weighted by how strongly.
    pub per_shock: Vec<DMatrix<f64>>,
    /// Shock-weighted sum of the aggregates per moment row; identical to the
    /// summed per-observation moment contributions by reordering.
    pub stacked: DVector<f64>,
}

/// Aggregate residuals to the shock level: for each market m, product k and
/// moment row, form R_km = sum_j weights[m][row][(j, k)] * residuals[m][j],
/// and stack sum_{k,m} shocks[m][k] * R_km across moment rows.
pub fn aggregate_shock_residuals(
    weights: &[Vec<DMatrix<f64>>],
    shocks: &[DVector<f64>],
    residuals: &[DVector<f64>],
) -> Result<ShockAggregation> {
    if weights.len() != shocks.len() || weights.len() != residuals.len() {
        return Err(Error::Dimension(
            "weights, shocks and residuals must cover the same markets".into(),
        ));
    }
    if weights.is_empty() {
        return Err(Error::InvalidInput("shock aggregation needs at least one market".into()));
    }
    let q = weights[0].len();
    if q == 0 {
        return Err(Error::InvalidInput("each market needs at least one weight block".into()));
    }
    let mut per_shock = Vec::with_capacity(weights.len());
    let mut stacked = DVector::zeros(q);
    for (m, blocks) in weights.iter().enumerate() {
        let j = residuals[m].len();
        if shocks[m].len() != j {
            return Err(Error::Dimension(format!(
                "market {m}: {} shocks for {j} residuals",
                shocks[m].len()
            )));
        }
        if blocks.len() != q {
            return Err(Error::Dimension(format!(
                "market {m}: {} weight blocks, expected {q}",
                blocks.len()
            )));
        }
        let mut agg = DMatrix::zeros(j, q);
        for (row, w) in blocks.iter().enumerate() {
            if w.nrows() != j || w.ncols() != j {
                return Err(Error::Dimension(format!(
                    "market {m} row {row}: weight block must be products by products"
                )));
            }
            let r = w.transpose() * &residuals[m];
            agg.set_column(row, &r);
            stacked[row] += shocks[m].dot(&r);
        }
        per_shock.push(agg);
    }
    Ok(ShockAggregation { per_shock, stacked })
}

/// Clustered sandwich standard errors for a fitted moment system:
/// (G'WG)^{-1} G'W Omega W G (G'WG)^{-1} scaled by the observation count,
/// with Omega built from within-cluster sums of the moment contributions.
pub fn clustered_standard_errors(
    fit: &FittedMoments,
    clustering: Clustering,
) -> Result<DVector<f64>> {
    let n = fit.contributions.nrows();
    let q = fit.contributions.ncols();
    let p = fit.jacobian.ncols();
    if fit.jacobian.nrows() != q || fit.weight.nrows() != q || fit.weight.ncols() != q {
        return Err(Error::Dimension(
            "jacobian and weight must match the moment dimension".into(),
        ));
    }
    if fit.cluster.len() != n {
        return Err(Error::Dimension("one cluster label per contribution row required".into()));
    }

    let (meat, clusters) = match clustering {
        Clustering::ByMarket => {
            let groups = fit.cluster.iter().copied().max().map_or(0, |m| m + 1);
            let mut sums = vec![DVector::<f64>::zeros(q); groups];
            let mut seen = vec![false; groups];
            for (i, &c) in fit.cluster.iter().enumerate() {
                sums[c] += fit.contributions.row(i).transpose();
                seen[c] = true;
            }
            let mut meat = DMatrix::zeros(q, q);
            for (c, sum) in sums.iter().enumerate() {
                if seen[c] {
                    meat += sum * sum.transpose();
                }
            }
            (meat, seen.iter().filter(|&&s| s).count())
        }
        Clustering::ByShock => {
            let pieces = fit.shock_level.as_ref().ok_or_else(|| {
                Error::MissingData(
                    "shock-level clustering needs a shift-share weight decomposition".into(),
                )
            })?;
            let agg =
                aggregate_shock_residuals(&pieces.weights, &pieces.shocks, &pieces.residuals)?;
            // The decomposition must reproduce the fitted moments; a gap
            // means the pieces belong to a different solution.
            let mut total = DVector::zeros(q);
            for i in 0..n {
                total += fit.contributions.row(i).transpose();
            }
            let gap = (&agg.stacked - &total).norm();
            if gap > 1e-8 * (1.0 + total.norm()) {
                return Err(Error::InvalidInput(format!(
                    "shock-level pieces disagree with the fitted moments (gap {gap:.3e})"
                )));
            }
            let mut meat = DMatrix::zeros(q, q);
            let mut clusters = 0usize;
            for (m, agg_m) in agg.per_shock.iter().enumerate() {
                for k in 0..agg_m.nrows() {
                    let unit = agg_m.row(k).transpose() * pieces.shocks[m][k];
                    meat += &unit * unit.transpose();
                    clusters += 1;
                }
            }
            (meat, clusters)
        }
    };

    if clusters < p {
        return Err(Error::InvalidInput(format!(
            "{clusters} clusters cannot identify a {p}-parameter covariance"
        )));
    }

    let gw = fit.jacobian.transpose() * &fit.weight;
    let normal = &gw * &fit.jacobian;
    let normal_inv = normal
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("moment jacobian G'WG singular".into()))?;
    let bread = normal_inv * gw;
    let cov = (&bread * meat * bread.transpose()) / (n as f64 * n as f64);

    let scale = cov.diagonal().amax();
    let mut se = DVector::zeros(p);
    for i in 0..p {
        let v = cov[(i, i)];
        if v < -1e-10 * (1.0 + scale) {
            return Err(Error::NonFinite(format!(
                "negative variance estimate for {}",
                fit.parameter_names.get(i).map(String::as_str).unwrap_or("parameter")
            )));
        }
        se[i] = v.max(0.0).sqrt();
    }
    Ok(se)
}

/// Standard errors for an estimation result, in the same parameter order as
/// `result.fitted.parameter_names`. Requires a converged fit.
pub fn gmm_standard_errors(
    result: &EstimationResult,
    clustering: Clustering,
) -> Result<DVector<f64>> {
    if !result.report.converged {
        return Err(Error::InvalidInput(
            "standard errors are only defined for a converged estimate".into(),
        ));
    }
    let fitted = result
        .fitted
        .as_ref()
        .ok_or_else(|| Error::MissingData("result carries no fitted moment pieces".into()))?;
    clustered_standard_errors(fitted, clustering)
}
