//! A small two-period nested-logit data generator and a pooled 2SLS
//! estimator for the demand equation. Together they let the instrument
//! family be validated end to end without the full mixed-logit machinery.

use super::{group_by_nest, iv_relative_shock, iv_weighted_shock, nested_shares, NestedMarket};
use crate::error::{Error, Result};
use crate::mixedlogit::Market;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::Distribution;

/// Two-period panel: period-one prices carry persistent cost and taste
/// components, period two adds the iid cost shocks. Prices are cost plus a
/// fixed markup plus a taste-quality term, so price is endogenous while the
/// shocks are exogenous by construction.
#[derive(Debug, Clone)]
pub struct NestedSimConfig {
    pub markets: usize,
    pub nest_sizes: Vec<usize>,
    /// Within-nest correlation sigma in [0,1).
    pub sigma: f64,
    /// Price coefficient alpha < 0.
    pub alpha: f64,
    /// Standard deviation of the iid cost shocks.
    pub shock_sd: f64,
    pub seed: u64,
}

impl Default for NestedSimConfig {
    fn default() -> Self {
        NestedSimConfig {
            markets: 50,
            nest_sizes: vec![3, 3, 4],
            sigma: 0.5,
            alpha: -1.0,
            shock_sd: 0.5,
            seed: 1,
        }
    }
}

const TASTE_SD: f64 = 0.3;
const COST_SD: f64 = 0.2;
const AR: f64 = 0.9;
const BASE_COST: f64 = 2.0;
const MARKUP: f64 = 0.5;
const QUALITY_PRICING: f64 = 0.3;

/// Simulate the period-two cross-section of markets, each carrying its
/// period-one shares as `pre_shares`.
pub fn simulate_nested_panel(config: &NestedSimConfig) -> Result<Vec<NestedMarket>> {
    if config.markets == 0 || config.nest_sizes.is_empty() {
        return Err(Error::InvalidInput("need at least one market and one nest".into()));
    }
    if config.nest_sizes.iter().any(|&n| n == 0) {
        return Err(Error::InvalidInput("empty nest in configuration".into()));
    }
    let j: usize = config.nest_sizes.iter().sum();
    let mut nest = Vec::with_capacity(j);
    for (label, &size) in config.nest_sizes.iter().enumerate() {
        nest.extend(std::iter::repeat(label).take(size));
    }
    let normal = rand_distr::StandardNormal;
    let mut out = Vec::with_capacity(config.markets);
    for m in 0..config.markets {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(m as u64);
        let mut draw = |sd: f64| -> DVector<f64> {
            DVector::from_fn(j, |_, _| {
                let z: f64 = normal.sample(&mut rng);
                sd * z
            })
        };
        let xi1 = draw(TASTE_SD);
        let omega1 = draw(COST_SD);
        let p1 = DVector::from_fn(j, |k, _| {
            BASE_COST + omega1[k] + MARKUP + QUALITY_PRICING * xi1[k]
        });
        let delta1 = &p1 * config.alpha + &xi1;
        let (s1, _) = nested_shares(&delta1, config.sigma, &nest)?;

        let innov_taste = draw(TASTE_SD * (1.0 - AR * AR).sqrt());
        let innov_cost = draw(COST_SD * (1.0 - AR * AR).sqrt());
        let xi2 = &xi1 * AR + innov_taste;
        let omega2 = &omega1 * AR + innov_cost;
        let g = draw(config.shock_sd);
        let p2 = DVector::from_fn(j, |k, _| {
            BASE_COST + omega2[k] + g[k] + MARKUP + QUALITY_PRICING * xi2[k]
        });
        let delta2 = &p2 * config.alpha + &xi2;
        let (s2, s0) = nested_shares(&delta2, config.sigma, &nest)?;

        let x = DMatrix::from_element(j, 1, 1.0);
        let x1 = DMatrix::zeros(j, 0);
        let market = Market::new(m, 2, x, x1, p2, s2, s0, g)?;
        out.push(NestedMarket::new(market, nest.clone(), config.sigma, Some(s1))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct NestedTwoStage {
    pub intercept: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub observations: usize,
}

/// Pooled just-identified 2SLS for
/// log(s_j/s0) = intercept + alpha p_j + sigma log(s_j/s_n) + error,
/// instrumenting with (1, g_j, z_j) where z_j is the relative-shock
/// instrument, or its lagged-share-weighted variant when `use_weighted`.
pub fn estimate_nested_2sls(
    markets: &[NestedMarket],
    use_weighted: bool,
) -> Result<NestedTwoStage> {
    if markets.is_empty() {
        return Err(Error::InvalidInput("no markets".into()));
    }
    let mut ztx = DMatrix::<f64>::zeros(3, 3);
    let mut zty = DVector::<f64>::zeros(3);
    let mut n_obs = 0usize;
    for nm in markets {
        let z_iv = if use_weighted { iv_weighted_shock(nm)? } else { iv_relative_shock(nm) };
        let groups = group_by_nest(&nm.nest);
        let mut nest_share = std::collections::BTreeMap::new();
        for (&label, members) in &groups {
            nest_share.insert(label, members.iter().map(|&k| nm.market.s[k]).sum::<f64>());
        }
        for k in 0..nm.market.products() {
            let y = (nm.market.s[k] / nm.market.s0).ln();
            let within = (nm.market.s[k] / nest_share[&nm.nest[k]]).ln();
            let x_row = [1.0, nm.market.p[k], within];
            let z_row = [1.0, nm.market.g[k], z_iv[k]];
            for a in 0..3 {
                for b in 0..3 {
                    ztx[(a, b)] += z_row[a] * x_row[b];
                }
                zty[a] += z_row[a] * y;
            }
            n_obs += 1;
        }
    }
    let lu = ztx.lu();
    let beta = lu
        .solve(&zty)
        .ok_or_else(|| Error::RankDeficient("instrument cross-moment matrix is singular".into()))?;
    Ok(NestedTwoStage {
        intercept: beta[0],
        alpha: beta[1],
        sigma: beta[2],
        observations: n_obs,
    })
}
