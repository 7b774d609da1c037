//! Closed-form nested-logit demand: shares, inversion, the cost-shock
//! instrument family, and a small self-contained simulator for validating
//! the instruments end to end.

mod instruments;
mod sim;

pub use instruments::{
    iv_exact_prediction, iv_relative_shock, iv_weighted_shock, recenter_exact,
};
pub use sim::{estimate_nested_2sls, simulate_nested_panel, NestedSimConfig, NestedTwoStage};

use crate::error::{Error, Result};
use crate::mixedlogit::Market;
use nalgebra::DVector;
use std::collections::BTreeMap;

/// A market with products grouped into nests. `pre_shares` are the same
/// products' shares in the prior period, when available.
#[derive(Debug, Clone)]
pub struct NestedMarket {
    pub market: Market,
    /// Nest label per product.
    pub nest: Vec<usize>,
    /// Within-nest correlation used when simulating this market.
    pub sigma_nest: f64,
    pub pre_shares: Option<DVector<f64>>,
}

impl NestedMarket {
    pub fn new(
        market: Market,
        nest: Vec<usize>,
        sigma_nest: f64,
        pre_shares: Option<DVector<f64>>,
    ) -> Result<Self> {
        let j = market.products();
        if nest.len() != j {
            return Err(Error::Dimension(format!(
                "{} nest labels for {j} products",
                nest.len()
            )));
        }
        if !(0.0..1.0).contains(&sigma_nest) {
            return Err(Error::InvalidInput(format!(
                "nest correlation must lie in [0,1), got {sigma_nest}"
            )));
        }
        if let Some(pre) = &pre_shares {
            if pre.len() != j {
                return Err(Error::Dimension("pre-period shares length mismatch".into()));
            }
            if pre.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidInput("pre-period shares must be positive".into()));
            }
        }
        Ok(NestedMarket { market, nest, sigma_nest, pre_shares })
    }

    /// Product indices grouped by nest label, in label order.
    pub fn nest_groups(&self) -> BTreeMap<usize, Vec<usize>> {
        group_by_nest(&self.nest)
    }
}

pub(crate) fn group_by_nest(nest: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, &n) in nest.iter().enumerate() {
        groups.entry(n).or_default().push(j);
    }
    groups
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(Error::InvalidInput(format!(
            "nest correlation must lie in [0,1), got {sigma}"
        )));
    }
    Ok(())
}

/// Nested-logit market shares. Per nest n with inclusive value
/// D_n = sum_{j in n} exp(delta_j / (1-sigma)), the within-nest share of j
/// is exp(delta_j/(1-sigma)) / D_n, the nest share is
/// D_n^{1-sigma} / (1 + sum_n' D_n'^{1-sigma}), and the outside good takes
/// the remainder. Everything is computed through nest-wise log-sum-exp.
pub fn nested_shares(
    delta: &DVector<f64>,
    sigma: f64,
    nest: &[usize],
) -> Result<(DVector<f64>, f64)> {
    check_sigma(sigma)?;
    let j = delta.len();
    if nest.len() != j {
        return Err(Error::Dimension(format!("{} nest labels for {j} products", nest.len())));
    }
    if j == 0 {
        return Err(Error::InvalidInput("no products".into()));
    }
    let groups = group_by_nest(nest);
    let scale = 1.0 - sigma;
    let mut log_d: BTreeMap<usize, f64> = BTreeMap::new();
    for (&label, members) in &groups {
        let m = members.iter().map(|&k| delta[k]).fold(f64::NEG_INFINITY, f64::max);
        let inner: f64 = members.iter().map(|&k| ((delta[k] - m) / scale).exp()).sum();
        log_d.insert(label, m / scale + inner.ln());
    }
    // Outside option contributes exp(0) to the top-level sum.
    let top_max = log_d.values().map(|&v| scale * v).fold(0.0f64, f64::max);
    let top_sum: f64 = (-top_max).exp()
        + log_d.values().map(|&v| (scale * v - top_max).exp()).sum::<f64>();
    let log_denom = top_max + top_sum.ln();
    let s0 = (-log_denom).exp();
    let s = DVector::from_fn(j, |k, _| {
        let ld = log_d[&nest[k]];
        (delta[k] / scale - sigma * ld - log_denom).exp()
    });
    Ok((s, s0))
}

/// Mean utilities from observed shares:
/// delta_j = log(s_j/s0) - sigma log(s_j/s_{n(j)}), the structural part of
/// the demand equation once the within-nest share term is moved across.
pub fn nested_inversion(
    s: &DVector<f64>,
    s0: f64,
    nest: &[usize],
    sigma: f64,
) -> Result<DVector<f64>> {
    check_sigma(sigma)?;
    let j = s.len();
    if nest.len() != j {
        return Err(Error::Dimension(format!("{} nest labels for {j} products", nest.len())));
    }
    if s.iter().any(|&v| !(v > 0.0)) || !(s0 > 0.0) {
        return Err(Error::InvalidInput("inversion requires positive shares".into()));
    }
    let groups = group_by_nest(nest);
    let mut nest_share: BTreeMap<usize, f64> = BTreeMap::new();
    for (&label, members) in &groups {
        nest_share.insert(label, members.iter().map(|&k| s[k]).sum());
    }
    Ok(DVector::from_fn(j, |k, _| {
        (s[k] / s0).ln() - sigma * (s[k] / nest_share[&nest[k]]).ln()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::Distribution;

    #[test]
    fn zero_correlation_is_plain_logit() {
        let delta = DVector::from_vec(vec![0.5, -0.3, 0.1]);
        let nest = [0usize, 0, 1];
        let (s, s0) = nested_shares(&delta, 0.0, &nest).unwrap();
        let denom: f64 = 1.0 + delta.iter().map(|d| d.exp()).sum::<f64>();
        for j in 0..3 {
            assert_relative_eq!(s[j], delta[j].exp() / denom, epsilon = 1e-14);
        }
        assert_relative_eq!(s0, 1.0 / denom, epsilon = 1e-14);
    }

    #[test]
    fn identical_products_share_equally() {
        let delta = DVector::from_vec(vec![0.7, 0.7, -0.2]);
        let nest = [0usize, 0, 1];
        let (s, _) = nested_shares(&delta, 0.6, &nest).unwrap();
        assert_relative_eq!(s[0], s[1], epsilon = 1e-14);
    }

    #[test]
    fn matches_hand_computed_inclusive_values() {
        // Independent arithmetic: D_1 = e^2 + 1, D_2 = e^-2 at sigma = 0.5,
        // nest shares D_n^0.5 / (1 + sum), within shares e^{2 delta} / D_n.
        let delta = DVector::from_vec(vec![1.0, 0.0, -1.0]);
        let nest = [0usize, 0, 1];
        let (s, s0) = nested_shares(&delta, 0.5, &nest).unwrap();
        assert_relative_eq!(s[0], 0.59825744137972752, epsilon = 1e-15);
        assert_relative_eq!(s[1], 0.080965340277536638, epsilon = 1e-15);
        assert_relative_eq!(s[2], 0.086270281044208647, epsilon = 1e-15);
        assert_relative_eq!(s0, 0.23450693729852719, epsilon = 1e-15);
    }

    #[test]
    fn inversion_trivial_cases() {
        let s = DVector::from_vec(vec![0.2, 0.3, 0.1]);
        let s0 = 0.4;
        let nest = [0usize, 0, 1];
        let d = nested_inversion(&s, s0, &nest, 0.0).unwrap();
        for j in 0..3 {
            assert_relative_eq!(d[j], (s[j] / s0).ln(), epsilon = 1e-14);
        }
        // Single nest, uniform shares: within-nest term is log(1/J).
        let j = 4;
        let s = DVector::from_element(j, 0.15);
        let nest = [7usize; 4];
        let d = nested_inversion(&s, 0.4, &nest, 0.5).unwrap();
        for k in 0..j {
            let expected = (0.15f64 / 0.4).ln() - 0.5 * (1.0f64 / 4.0).ln();
            assert_relative_eq!(d[k], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn domain_errors() {
        let delta = DVector::from_vec(vec![0.0]);
        assert!(nested_shares(&delta, 1.0, &[0]).is_err());
        assert!(nested_shares(&delta, -0.1, &[0]).is_err());
        assert!(nested_shares(&delta, 0.5, &[0, 1]).is_err());
    }

    #[test]
    fn extreme_utilities_stay_finite() {
        let delta = DVector::from_vec(vec![500.0, -500.0, 0.0]);
        let nest = [0usize, 0, 1];
        let (s, s0) = nested_shares(&delta, 0.8, &nest).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(s0.is_finite());
        assert!(s[0] > 0.999);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn shares_and_inversion_roundtrip(
            d in proptest::collection::vec(-3.0f64..3.0, 1..12),
            sigma in 0.0f64..0.9,
            seed in 0u64..1000,
        ) {
            let j = d.len();
            let delta = DVector::from_vec(d);
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let labels = rand::distributions::Uniform::new(0usize, 3);
            let nest: Vec<usize> = (0..j).map(|_| labels.sample(&mut rng)).collect();
            let (s, s0) = nested_shares(&delta, sigma, &nest).unwrap();
            prop_assert!((s.sum() + s0 - 1.0).abs() < 1e-12);
            let back = nested_inversion(&s, s0, &nest, sigma).unwrap();
            for k in 0..j {
                prop_assert!((back[k] - delta[k]).abs() < 1e-12);
            }
        }
    }
}
