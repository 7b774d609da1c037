//! Share inversion and the implicit-function derivative blocks of the
//! inverse map.

use super::shares::{
    share_cross_sigma_delta, share_dsigma, share_hessian_delta_contract, share_jacobian_delta,
    shares_unchecked,
};
use super::{validate_share_inputs, ConsumerDraws, Market, Theta, MIN_SHARE};
use crate::error::{Error, Result};
use crate::solvers::{accelerated_fixed_point, FixedPointConfig, FixedPointReport};
use nalgebra::{DMatrix, DVector};

/// Condition numbers of the share Jacobian beyond this are treated as
/// numerically singular.
pub const MAX_JACOBIAN_CONDITION: f64 = 1e12;

fn validate_observed_shares(s: &DVector<f64>, s0: f64) -> Result<()> {
    if s.iter().any(|&v| !(v > MIN_SHARE) || !v.is_finite()) || !(s0 > MIN_SHARE) {
        return Err(Error::InvalidInput(
            "inversion requires strictly interior shares".into(),
        ));
    }
    if s.sum() >= 1.0 {
        return Err(Error::InvalidInput("inside shares sum to one or more".into()));
    }
    Ok(())
}

/// Mean utilities rationalizing observed shares: the fixed point of
/// delta <- delta + log s - log S(delta), started from the plain-logit
/// inversion log(s / s0). With zero spreads the start is already exact, so
/// the solver stops after a single map evaluation.
pub fn invert_shares(
    s: &DVector<f64>,
    s0: f64,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
    config: &FixedPointConfig,
) -> Result<(DVector<f64>, FixedPointReport)> {
    validate_observed_shares(s, s0)?;
    let start = DVector::from_fn(s.len(), |j, _| (s[j] / s0).ln());
    invert_shares_from(s, sigma, x1, draws, &start, config)
}

/// `invert_shares` from a caller-supplied starting point, for warm starts
/// across nearby spread values.
pub fn invert_shares_from(
    s: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
    start: &DVector<f64>,
    config: &FixedPointConfig,
) -> Result<(DVector<f64>, FixedPointReport)> {
    validate_observed_shares(s, 1.0 - s.sum())?;
    validate_share_inputs(start, sigma, x1, draws)?;
    let log_s = s.map(f64::ln);
    let map = |delta: &DVector<f64>| {
        let sim = shares_unchecked(delta, sigma, x1, draws);
        DVector::from_fn(delta.len(), |j, _| delta[j] + log_s[j] - sim[j].ln())
    };
    let (delta, report) = accelerated_fixed_point(map, start, config)?;
    if !report.converged {
        return Err(Error::NonConvergence(format!(
            "share inversion stopped at residual {:.3e} after {} map evaluations",
            report.residual, report.iterations
        )));
    }
    Ok((delta, report))
}

/// Derivative blocks of the inverse share map at an inverted market.
#[derive(Debug, Clone)]
pub struct InversionDerivatives {
    /// Mean utilities the blocks are evaluated at.
    pub delta: DVector<f64>,
    /// d S / d delta': the share Jacobian whose inverse is `ds`.
    pub jacobian: DMatrix<f64>,
    /// d D / d s': inverse of the share Jacobian.
    pub ds: DMatrix<f64>,
    /// d D / d sigma, J x L1.
    pub dsigma: DMatrix<f64>,
    /// d/d sigma_l of ds, one J x J block per spread.
    pub dcross: Vec<DMatrix<f64>>,
    /// One-norm condition estimate of the share Jacobian.
    pub condition: f64,
}

/// Invert the market's shares under `theta` and differentiate the inverse
/// map by the implicit function theorem.
pub fn inversion_derivatives(
    market: &Market,
    theta: &Theta,
    draws: &ConsumerDraws,
) -> Result<InversionDerivatives> {
    let config = FixedPointConfig::default();
    let (delta, _) = invert_shares(
        &market.s,
        market.s0,
        &theta.sigma,
        &market.x1,
        draws,
        &config,
    )?;
    inversion_derivatives_at_delta(&delta, &theta.sigma, &market.x1, draws)
}

/// The derivative blocks at known mean utilities, skipping the inversion.
/// Used when the caller has already inverted (or synthesized) delta.
pub fn inversion_derivatives_at_delta(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<InversionDerivatives> {
    let a = share_jacobian_delta(delta, sigma, x1, draws)?;
    let (ds, condition) = gated_inverse(&a)?;

    let dshares_sigma = share_dsigma(delta, sigma, x1, draws)?;
    let dsigma = -&ds * &dshares_sigma;

    let cross_shares = share_cross_sigma_delta(delta, sigma, x1, draws)?;
    let mut dcross = Vec::with_capacity(sigma.len());
    for l in 0..sigma.len() {
        // Total derivative of the share Jacobian along sigma_l: the Hessian
        // contracted with the movement of delta, plus the direct cross term.
        let v = dsigma.column(l).into_owned();
        let moved = share_hessian_delta_contract(delta, sigma, x1, draws, &v)?;
        let total = moved + &cross_shares[l];
        dcross.push(-(&ds * total * &ds));
    }

    Ok(InversionDerivatives { delta: delta.clone(), jacobian: a, ds, dsigma, dcross, condition })
}

/// d D / d sigma alone at known mean utilities. Cheaper than the full
/// derivative bundle when the cross blocks are not needed: two share
/// integrations instead of the six-plus the bundle costs.
pub fn inversion_sigma_gradient(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<DMatrix<f64>> {
    let a = share_jacobian_delta(delta, sigma, x1, draws)?;
    let (ds, _) = gated_inverse(&a)?;
    let dshares_sigma = share_dsigma(delta, sigma, x1, draws)?;
    Ok(-&ds * &dshares_sigma)
}

/// Invert the share Jacobian, rejecting it as numerically singular past the
/// condition gate.
fn gated_inverse(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let ds = a.clone().lu().try_inverse().ok_or_else(|| {
        Error::IllConditioned("share jacobian is singular".into(), f64::INFINITY)
    })?;
    let condition = one_norm(a) * one_norm(&ds);
    if !condition.is_finite() || condition > MAX_JACOBIAN_CONDITION {
        return Err(Error::IllConditioned(
            format!("share jacobian condition {condition:.3e} exceeds {MAX_JACOBIAN_CONDITION:.1e}"),
            condition,
        ));
    }
    Ok((ds, condition))
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|c| m.column(c).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Draw-free second-order inversion: log(s_j/s0) minus half the
/// spread-weighted curvature correction
/// a_jl = (x_jl - xbar_l)^2 - xbar_l^2 with xbar_l the share-weighted mean
/// characteristic. Error is cubic in the spreads.
pub fn local_to_logit_inversion(
    s: &DVector<f64>,
    s0: f64,
    x1: &DMatrix<f64>,
    sigma: &DVector<f64>,
) -> Result<DVector<f64>> {
    validate_observed_shares(s, s0)?;
    let j = s.len();
    if x1.nrows() != j || x1.ncols() != sigma.len() {
        return Err(Error::Dimension("x1 must be products x spreads".into()));
    }
    let mut delta = DVector::from_fn(j, |jj, _| (s[jj] / s0).ln());
    for l in 0..sigma.len() {
        let col = x1.column(l);
        let xbar = s.dot(&col);
        let half = 0.5 * sigma[l] * sigma[l];
        for jj in 0..j {
            let a = (col[jj] - xbar) * (col[jj] - xbar) - xbar * xbar;
            delta[jj] -= half * a;
        }
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::super::shares::{shares, shares_second_order};
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::Distribution;

    fn test_config() -> FixedPointConfig {
        FixedPointConfig::default()
    }

    #[test]
    fn zero_spread_inverts_in_one_evaluation() {
        let s = DVector::from_vec(vec![0.2, 0.35, 0.15]);
        let s0 = 0.3;
        let sigma = DVector::zeros(1);
        let x1 = DMatrix::from_row_slice(3, 1, &[0.5, -0.2, 1.1]);
        let draws = ConsumerDraws::scrambled_halton(1, 16).unwrap();
        let (delta, report) = invert_shares(&s, s0, &sigma, &x1, &draws, &test_config()).unwrap();
        assert_eq!(report.iterations, 1);
        for j in 0..3 {
            assert_relative_eq!(delta[j], (s[j] / s0).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_shares_give_zero_utilities() {
        let j = 4;
        let s = DVector::from_element(j, 1.0 / (j as f64 + 1.0));
        let s0 = 1.0 / (j as f64 + 1.0);
        let sigma = DVector::zeros(1);
        let x1 = DMatrix::from_row_slice(4, 1, &[0.5, -0.2, 1.1, 0.0]);
        let draws = ConsumerDraws::scrambled_halton(1, 16).unwrap();
        let (delta, _) = invert_shares(&s, s0, &sigma, &x1, &draws, &test_config()).unwrap();
        assert!(delta.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn roundtrip_with_wide_spreads() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        let normal = rand_distr::StandardNormal;
        let j = 5;
        let delta_true = DVector::from_fn(j, |_, _| normal.sample(&mut rng));
        let x1 = DMatrix::from_fn(j, 2, |_, _| normal.sample(&mut rng));
        let sigma = DVector::from_vec(vec![2.0, 2.0]);
        let draws = ConsumerDraws::scrambled_halton(2, 100).unwrap();
        let s = shares(&delta_true, &sigma, &x1, &draws).unwrap();
        let s0 = 1.0 - s.sum();
        let (delta, report) = invert_shares(&s, s0, &sigma, &x1, &draws, &test_config()).unwrap();
        assert!(report.converged);
        for jj in 0..j {
            assert!(
                (delta[jj] - delta_true[jj]).abs() < 1e-8,
                "product {jj}: {} vs {}",
                delta[jj],
                delta_true[jj]
            );
        }
    }

    #[test]
    fn warm_start_from_the_answer_is_immediate() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(13);
        let normal = rand_distr::StandardNormal;
        let j = 8;
        let delta_true = DVector::from_fn(j, |_, _| normal.sample(&mut rng));
        let x1 = DMatrix::from_fn(j, 2, |_, _| normal.sample(&mut rng));
        let sigma = DVector::from_vec(vec![3.0, 3.0]);
        let draws = ConsumerDraws::scrambled_halton(2, 64).unwrap();
        let s = shares(&delta_true, &sigma, &x1, &draws).unwrap();
        let s0 = 1.0 - s.sum();
        let cfg = test_config();
        let (delta_cold, report_cold) = invert_shares(&s, s0, &sigma, &x1, &draws, &cfg).unwrap();
        assert!(report_cold.converged);
        let (delta_warm, report_warm) =
            invert_shares_from(&s, &sigma, &x1, &draws, &delta_cold, &cfg).unwrap();
        assert_eq!(report_warm.iterations, 1);
        for jj in 0..j {
            assert!((delta_warm[jj] - delta_cold[jj]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_convergence_carries_residual() {
        let s = DVector::from_vec(vec![0.2, 0.35, 0.15]);
        let sigma = DVector::from_vec(vec![3.0]);
        let x1 = DMatrix::from_row_slice(3, 1, &[0.5, -0.2, 1.1]);
        let draws = ConsumerDraws::scrambled_halton(1, 32).unwrap();
        let tight = FixedPointConfig { max_iterations: 2, ..FixedPointConfig::default() };
        let err = invert_shares(&s, 0.3, &sigma, &x1, &draws, &tight).unwrap_err();
        match err {
            Error::NonConvergence(msg) => assert!(msg.contains("residual")),
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_boundary_shares_but_accepts_tiny_interior_ones() {
        let sigma = DVector::zeros(1);
        let x1 = DMatrix::from_row_slice(2, 1, &[0.5, -0.2]);
        let draws = ConsumerDraws::scrambled_halton(1, 8).unwrap();
        let zero = DVector::from_vec(vec![0.0, 0.3]);
        assert!(invert_shares(&zero, 0.7, &sigma, &x1, &draws, &test_config()).is_err());
        let subnormal = DVector::from_vec(vec![1e-320, 0.3]);
        assert!(invert_shares(&subnormal, 0.7, &sigma, &x1, &draws, &test_config()).is_err());
        let heavy = DVector::from_vec(vec![0.7, 0.4]);
        assert!(invert_shares(&heavy, 0.1, &sigma, &x1, &draws, &test_config()).is_err());
        // Strictly positive but extremely unpopular products are legitimate
        // observations and must invert exactly at sigma = 0.
        let tiny = DVector::from_vec(vec![1e-15, 0.3]);
        let (d, _) =
            invert_shares(&tiny, 0.7 - 1e-15, &sigma, &x1, &draws, &test_config()).unwrap();
        assert_relative_eq!(d[0], (1e-15f64 / (0.7 - 1e-15)).ln(), epsilon = 1e-12);
    }

    fn synthetic_market(seed: u64, j: usize, sigma: &DVector<f64>, draws: &ConsumerDraws) -> (Market, DVector<f64>) {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let delta_true = DVector::from_fn(j, |_, _| { let z: f64 = normal.sample(&mut rng); 0.5 * z });
        let x1 = DMatrix::from_fn(j, sigma.len(), |_, _| normal.sample(&mut rng));
        let s = shares(&delta_true, sigma, &x1, draws).unwrap();
        let s0 = 1.0 - s.sum();
        let mut x = DMatrix::zeros(j, sigma.len() + 1);
        for jj in 0..j {
            x[(jj, 0)] = 1.0;
            for l in 0..sigma.len() {
                x[(jj, l + 1)] = x1[(jj, l)];
            }
        }
        let p = DVector::from_fn(j, |_, _| { let z: f64 = normal.sample(&mut rng); 5.0 + z });
        let g = DVector::zeros(j);
        let market = Market::new(seed as usize, 1, x, x1, p, s, s0, g).unwrap();
        (market, delta_true)
    }

    #[test]
    fn plain_logit_inverse_closed_form() {
        let sigma = DVector::zeros(2);
        let draws = ConsumerDraws::scrambled_halton(2, 32).unwrap();
        let (market, _) = synthetic_market(3, 4, &sigma, &draws);
        let theta = Theta::new(-1.0, sigma.clone()).unwrap();
        let blocks = inversion_derivatives(&market, &theta, &draws).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                let expected = if j == k { 1.0 / market.s[j] + 1.0 / market.s0 } else { 1.0 / market.s0 };
                assert_relative_eq!(blocks.ds[(j, k)], expected, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn ds_is_the_jacobian_inverse() {
        let sigma = DVector::from_vec(vec![1.2, 0.7]);
        let draws = ConsumerDraws::scrambled_halton(2, 64).unwrap();
        let (market, _) = synthetic_market(7, 5, &sigma, &draws);
        let theta = Theta::new(-1.0, sigma.clone()).unwrap();
        let blocks = inversion_derivatives(&market, &theta, &draws).unwrap();
        let a = share_jacobian_delta(&blocks.delta, &sigma, &market.x1, &draws).unwrap();
        let product = &blocks.ds * &a;
        for j in 0..5 {
            for k in 0..5 {
                let expected = if j == k { 1.0 } else { 0.0 };
                assert!((product[(j, k)] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dsigma_and_dcross_match_finite_differences() {
        let sigma = DVector::from_vec(vec![1.0, 0.6]);
        let draws = ConsumerDraws::scrambled_halton(2, 64).unwrap();
        let (market, _) = synthetic_market(11, 4, &sigma, &draws);
        let theta = Theta::new(-1.0, sigma.clone()).unwrap();
        let blocks = inversion_derivatives(&market, &theta, &draws).unwrap();
        let cfg = test_config();
        let h = 1e-5;
        for l in 0..2 {
            let mut sp = sigma.clone();
            sp[l] += h;
            let mut sm = sigma.clone();
            sm[l] -= h;
            let (dp, _) = invert_shares(&market.s, market.s0, &sp, &market.x1, &draws, &cfg).unwrap();
            let (dm, _) = invert_shares(&market.s, market.s0, &sm, &market.x1, &draws, &cfg).unwrap();
            for j in 0..4 {
                let fd = (dp[j] - dm[j]) / (2.0 * h);
                let denom = blocks.dsigma[(j, l)].abs().max(1.0);
                assert!(
                    ((blocks.dsigma[(j, l)] - fd) / denom).abs() < 1e-4,
                    "dsigma[{j},{l}] = {} vs fd {fd}",
                    blocks.dsigma[(j, l)]
                );
            }
            let bp = inversion_derivatives_at_delta(&dp, &sp, &market.x1, &draws).unwrap();
            let bm = inversion_derivatives_at_delta(&dm, &sm, &market.x1, &draws).unwrap();
            let fd_cross = (&bp.ds - &bm.ds) / (2.0 * h);
            let scale = fd_cross.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
            let gap = (&blocks.dcross[l] - &fd_cross)
                .iter()
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!(gap / scale < 1e-4, "dcross[{l}] rel err {}", gap / scale);
        }
    }

    #[test]
    fn near_singular_jacobian_reports_condition() {
        // Two identical products crowding out the outside option: the
        // Jacobian's eigenvalue along the common-utility direction collapses
        // with the outside share.
        let delta = DVector::from_vec(vec![40.0, 40.0]);
        let sigma = DVector::zeros(1);
        let x1 = DMatrix::from_row_slice(2, 1, &[0.5, -0.2]);
        let draws = ConsumerDraws::scrambled_halton(1, 16).unwrap();
        let err = inversion_derivatives_at_delta(&delta, &sigma, &x1, &draws).unwrap_err();
        match err {
            Error::IllConditioned(_, cond) => assert!(cond > MAX_JACOBIAN_CONDITION || cond.is_infinite()),
            other => panic!("expected IllConditioned, got {other:?}"),
        }
    }

    #[test]
    fn local_inversion_trivial_cases() {
        let s = DVector::from_vec(vec![0.2, 0.35, 0.15]);
        let s0 = 0.3;
        let x1 = DMatrix::from_row_slice(3, 1, &[0.5, -0.2, 1.1]);
        let zero_sigma = DVector::zeros(1);
        let d = local_to_logit_inversion(&s, s0, &x1, &zero_sigma).unwrap();
        for j in 0..3 {
            assert_relative_eq!(d[j], (s[j] / s0).ln(), epsilon = 1e-14);
        }
        let zero_x = DMatrix::zeros(3, 1);
        let sigma = DVector::from_vec(vec![2.5]);
        let d = local_to_logit_inversion(&s, s0, &zero_x, &sigma).unwrap();
        for j in 0..3 {
            assert_relative_eq!(d[j], (s[j] / s0).ln(), epsilon = 1e-14);
        }
    }

    use crate::testutil::standardized_skewed_draws as skewed_draws;

    #[test]
    fn small_spread_approximations_have_cubic_error() {
        // Tripling the spreads from 0.02 to 0.06 should scale both
        // approximation errors by about 27; the acceptance band is a factor
        // of 3 either side. Both the approximation and the simulated truth
        // use the same draw set, so the comparison has no sampling noise.
        let j = 4;
        let delta = DVector::from_vec(vec![0.2, -0.4, 0.1, 0.3]);
        let x1 = DMatrix::from_row_slice(
            4,
            2,
            &[1.3, -0.6, -0.8, 0.9, 0.4, 1.2, -1.1, -0.3],
        );
        let draws = skewed_draws(256, 2, 99);
        let cfg = test_config();

        let err_at = |t: f64| -> (f64, f64) {
            let sigma = DVector::from_element(2, t);
            let s_true = shares(&delta, &sigma, &x1, &draws).unwrap();
            let s0 = 1.0 - s_true.sum();
            let s_approx = shares_second_order(&delta, &sigma, &x1).unwrap();
            let share_err = (0..j)
                .map(|jj| (s_approx[jj] - s_true[jj]).abs())
                .fold(0.0f64, f64::max);
            let d_approx = local_to_logit_inversion(&s_true, s0, &x1, &sigma).unwrap();
            let (d_true, _) =
                invert_shares(&s_true, s0, &sigma, &x1, &draws, &cfg).unwrap();
            let inv_err = (0..j)
                .map(|jj| (d_approx[jj] - d_true[jj]).abs())
                .fold(0.0f64, f64::max);
            (share_err, inv_err)
        };

        let (s_small, d_small) = err_at(0.02);
        let (s_large, d_large) = err_at(0.06);
        let share_ratio = s_large / s_small;
        let inv_ratio = d_large / d_small;
        assert!(
            share_ratio > 9.0 && share_ratio < 81.0,
            "share error ratio {share_ratio}"
        );
        assert!(
            inv_ratio > 9.0 && inv_ratio < 81.0,
            "inversion error ratio {inv_ratio}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn inversion_roundtrip_over_market_sizes_and_spreads(
            j in 1usize..=15,
            s1 in 0.0f64..4.0,
            s2 in 0.0f64..4.0,
            seed in 0u64..500,
        ) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let normal = rand_distr::StandardNormal;
            let delta_true = DVector::from_fn(j, |_, _| { let z: f64 = normal.sample(&mut rng); 0.8 * z });
            let x1 = DMatrix::from_fn(j, 2, |_, _| normal.sample(&mut rng));
            let sigma = DVector::from_vec(vec![s1, s2]);
            let draws = ConsumerDraws::pseudo_random(2, 32, seed ^ 0x5555).unwrap();
            let s = shares(&delta_true, &sigma, &x1, &draws).unwrap();
            let s0 = 1.0 - s.sum();
            prop_assume!(s.iter().all(|&v| v > 1e-12) && s0 > 1e-12);
            let (delta, _) = invert_shares(&s, s0, &sigma, &x1, &draws, &FixedPointConfig::default()).unwrap();
            for jj in 0..j {
                prop_assert!((delta[jj] - delta_true[jj]).abs() < 1e-8);
            }
        }
    }
}
