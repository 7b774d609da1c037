//! Cost-shock instruments for the nested-logit demand equation: shift-share
//! contrasts of the shocks within nests, exact model-based predictions of
//! the within-nest share, and recentering against counterfactual shocks.

use super::{group_by_nest, NestedMarket};
use crate::error::{Error, Result};
use nalgebra::DVector;

/// Own cost shock relative to the unweighted mean shock in the product's
/// nest. Sums to zero within every nest by construction; a singleton nest
/// gets zero.
pub fn iv_relative_shock(market: &NestedMarket) -> DVector<f64> {
    let g = &market.market.g;
    let groups = group_by_nest(&market.nest);
    let mut z = DVector::zeros(g.len());
    for members in groups.values() {
        let mean: f64 = members.iter().map(|&k| g[k]).sum::<f64>() / members.len() as f64;
        for &k in members {
            z[k] = g[k] - mean;
        }
    }
    z
}

/// Own cost shock relative to the lagged-share-weighted mean shock in the
/// nest: the first-order share response around pre-period shares rather
/// than equal shares. The lagged-share-weighted sum is zero within every
/// nest.
pub fn iv_weighted_shock(market: &NestedMarket) -> Result<DVector<f64>> {
    let pre = market
        .pre_shares
        .as_ref()
        .ok_or_else(|| Error::MissingData("weighted shock instrument needs pre-period shares".into()))?;
    let g = &market.market.g;
    let groups = group_by_nest(&market.nest);
    let mut z = DVector::zeros(g.len());
    for members in groups.values() {
        let total: f64 = members.iter().map(|&k| pre[k]).sum();
        let mean: f64 = members.iter().map(|&k| pre[k] * g[k]).sum::<f64>() / total;
        for &k in members {
            z[k] = g[k] - mean;
        }
    }
    Ok(z)
}

/// Exact model-based prediction of the log within-nest share from predicted
/// prices p_hat = pi_check * g (plus a level that cancels): with
/// c = alpha_check pi_check / (1 - sigma_check),
///
///   c g_j - log sum_{k in n(j)} exp(c g_k)
///
/// and, when `use_lagged`, around pre-period shares instead of equal shares:
///
///   log(s_j^pre / s_n^pre) + c g_j
///     - log sum_{k in n(j)} (s_k^pre / s_n^pre) exp(c g_k).
pub fn iv_exact_prediction(
    market: &NestedMarket,
    alpha_check: f64,
    sigma_check: f64,
    pi_check: f64,
    use_lagged: bool,
) -> Result<DVector<f64>> {
    if !(0.0..1.0).contains(&sigma_check) {
        return Err(Error::InvalidInput(format!(
            "preliminary nest correlation must lie in [0,1), got {sigma_check}"
        )));
    }
    if pi_check == 0.0 || !pi_check.is_finite() {
        return Err(Error::InvalidInput("pass-through must be finite and nonzero".into()));
    }
    let c = alpha_check * pi_check / (1.0 - sigma_check);
    let g = &market.market.g;
    let groups = group_by_nest(&market.nest);
    let mut z = DVector::zeros(g.len());
    if use_lagged {
        let pre = market.pre_shares.as_ref().ok_or_else(|| {
            Error::MissingData("exact prediction around lagged shares needs pre-period shares".into())
        })?;
        for members in groups.values() {
            let s_nest: f64 = members.iter().map(|&k| pre[k]).sum();
            let m = members.iter().map(|&k| c * g[k]).fold(f64::NEG_INFINITY, f64::max);
            let log_sum = m
                + members
                    .iter()
                    .map(|&k| (pre[k] / s_nest) * (c * g[k] - m).exp())
                    .sum::<f64>()
                    .ln();
            for &k in members {
                z[k] = (pre[k] / s_nest).ln() + c * g[k] - log_sum;
            }
        }
    } else {
        for members in groups.values() {
            let m = members.iter().map(|&k| c * g[k]).fold(f64::NEG_INFINITY, f64::max);
            let log_sum =
                m + members.iter().map(|&k| (c * g[k] - m).exp()).sum::<f64>().ln();
            for &k in members {
                z[k] = c * g[k] - log_sum;
            }
        }
    }
    Ok(z)
}

/// Recenter a shock-based prediction: evaluate it at the observed shocks and
/// subtract its mean over counterfactual shock vectors. Validity then rests
/// on how the shocks were drawn, not on the prediction formula.
pub fn recenter_exact<F>(
    mut prediction: F,
    market: &NestedMarket,
    counterfactual_shocks: &[DVector<f64>],
) -> Result<DVector<f64>>
where
    F: FnMut(&NestedMarket, &DVector<f64>) -> Result<DVector<f64>>,
{
    if counterfactual_shocks.is_empty() {
        return Err(Error::InvalidInput("recentering needs at least one counterfactual".into()));
    }
    let j = market.market.products();
    let actual = prediction(market, &market.market.g)?;
    if actual.len() != j {
        return Err(Error::Dimension("prediction length differs from product count".into()));
    }
    let mut mean = DVector::zeros(j);
    for shocks in counterfactual_shocks {
        if shocks.len() != j {
            return Err(Error::Dimension("counterfactual shock length mismatch".into()));
        }
        let pred = prediction(market, shocks)?;
        if pred.len() != j {
            return Err(Error::Dimension("prediction length differs from product count".into()));
        }
        mean += pred;
    }
    mean /= counterfactual_shocks.len() as f64;
    Ok(actual - mean)
}
