//! Equilibrium pricing. Prices solve the first-order-condition system
//! p = c - [dS/dp']^{-1} S, where price moves shares only through mean
//! utilities (no random coefficient on price), so dS/dp' = alpha * dS/ddelta'.
//!
//! The primary solver iterates the markup fixed point
//! p <- c + Lambda^{-1} Gamma (p - c) - Lambda^{-1} S with
//! Lambda = alpha diag(S) and Gamma = alpha E[s_i s_i']; its fixed point is
//! exactly the first-order condition. A solution is accepted only when an
//! independent evaluation of the first-order-condition residual passes; a
//! damped Newton on the residual system is the fallback.

use crate::error::{Error, Result};
use crate::mixedlogit::{
    share_hessian_delta_contract, shares_and_jacobian_unchecked, ConsumerDraws, Theta,
};
use crate::solvers::{accelerated_fixed_point, Acceleration, FixedPointConfig};
use nalgebra::{DMatrix, DVector};

/// Sup-norm tolerance on p - c + [dS/dp']^{-1} S at an accepted solution.
pub const FOC_TOLERANCE: f64 = 1e-8;

const ZETA_TOLERANCE: f64 = 1e-10;
const ZETA_MAX_ITERATIONS: usize = 5_000;
const NEWTON_MAX_ITERATIONS: usize = 100;

fn mean_utility(delta_exogenous: &DVector<f64>, alpha: f64, p: &DVector<f64>) -> DVector<f64> {
    delta_exogenous + p * alpha
}

/// Residual of the first-order-condition system at `p`, evaluated from
/// scratch: sup-norm of p - c + (alpha A)^{-1} S with A = dS/ddelta'.
/// Infinite when the Jacobian cannot be inverted.
pub fn foc_residual(
    p: &DVector<f64>,
    costs: &DVector<f64>,
    delta_exogenous: &DVector<f64>,
    theta: &Theta,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> f64 {
    let delta = mean_utility(delta_exogenous, theta.alpha, p);
    let (s, a) = shares_and_jacobian_unchecked(&delta, &theta.sigma, x1, draws);
    match (a * theta.alpha).lu().solve(&s) {
        Some(x) => (p - costs + x).amax(),
        None => f64::INFINITY,
    }
}

fn markups_positive(p: &DVector<f64>, costs: &DVector<f64>) -> bool {
    p.iter().zip(costs.iter()).all(|(&pj, &cj)| pj > cj)
}

/// The markup map. Using Lambda = alpha diag(S) and Gamma = alpha E[ss'],
/// Lambda^{-1} Gamma = I - diag(1/S) A and Lambda^{-1} S = (1/alpha) 1, so
/// the update is p - diag(1/S) A (p - c) - (1/alpha) 1.
fn zeta_map(
    p: &DVector<f64>,
    costs: &DVector<f64>,
    delta_exogenous: &DVector<f64>,
    theta: &Theta,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> DVector<f64> {
    let delta = mean_utility(delta_exogenous, theta.alpha, p);
    let (s, a) = shares_and_jacobian_unchecked(&delta, &theta.sigma, x1, draws);
    let markup = p - costs;
    let a_markup = &a * &markup;
    DVector::from_fn(p.len(), |jj, _| p[jj] - a_markup[jj] / s[jj] - 1.0 / theta.alpha)
}

fn newton_fallback(
    start: &DVector<f64>,
    costs: &DVector<f64>,
    delta_exogenous: &DVector<f64>,
    theta: &Theta,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<DVector<f64>> {
    let alpha = theta.alpha;
    // Root-find H(p) = alpha A(p)(p - c) + S(p) = 0, an equivalent form of
    // the first-order conditions that avoids inverting A inside the loop.
    let h_at = |p: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        let delta = mean_utility(delta_exogenous, alpha, p);
        let (s, a) = shares_and_jacobian_unchecked(&delta, &theta.sigma, x1, draws);
        let h = &a * &(p - costs) * alpha + &s;
        (h, delta, a)
    };
    let mut p = start.clone();
    if !p.iter().all(|v| v.is_finite()) {
        p = costs - DVector::from_element(costs.len(), 1.0 / alpha);
    }
    for _ in 0..NEWTON_MAX_ITERATIONS {
        let (h, delta, a) = h_at(&p);
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("price residual".into()));
        }
        if foc_residual(&p, costs, delta_exogenous, theta, x1, draws) <= FOC_TOLERANCE {
            return Ok(p);
        }
        // dH/dp' = 2 alpha A + alpha^2 * (Hessian of S contracted with p - c).
        let contracted =
            share_hessian_delta_contract(&delta, &theta.sigma, x1, draws, &(&p - costs))?;
        let jac = &a * (2.0 * alpha) + contracted * (alpha * alpha);
        let step = jac
            .lu()
            .solve(&(-&h))
            .ok_or_else(|| Error::RankDeficient("price Newton system".into()))?;
        let h_norm = h.amax();
        let mut lambda = 1.0;
        loop {
            let trial = &p + &step * lambda;
            let (h_trial, _, _) = h_at(&trial);
            if h_trial.iter().all(|v| v.is_finite()) && h_trial.amax() < h_norm {
                p = trial;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Err(Error::NonConvergence("price Newton stalled".into()));
            }
        }
    }
    Err(Error::NonConvergence("price Newton exhausted its iteration budget".into()))
}

/// Solve for Bertrand-Nash equilibrium prices given marginal costs and the
/// price-free part of mean utility. Tries the markup fixed point first, then
/// the damped Newton; an error from both is the market-drop signal.
pub fn solve_prices(
    costs: &DVector<f64>,
    delta_exogenous: &DVector<f64>,
    theta: &Theta,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<DVector<f64>> {
    let j = costs.len();
    if delta_exogenous.len() != j || x1.nrows() != j {
        return Err(Error::Dimension(format!(
            "costs have {j} products, mean utilities {}, characteristics {}",
            delta_exogenous.len(),
            x1.nrows()
        )));
    }
    if theta.sigma.len() != x1.ncols() {
        return Err(Error::Dimension(format!(
            "{} taste spreads vs {} random-coefficient characteristics",
            theta.sigma.len(),
            x1.ncols()
        )));
    }
    // Single-product markup floor -1/alpha is a cheap interior start.
    let start = costs - DVector::from_element(j, 1.0 / theta.alpha);
    let config = FixedPointConfig {
        tolerance: ZETA_TOLERANCE,
        max_iterations: ZETA_MAX_ITERATIONS,
        acceleration: Acceleration::Squarem,
    };
    let fixed_point = accelerated_fixed_point(
        |p| zeta_map(p, costs, delta_exogenous, theta, x1, draws),
        &start,
        &config,
    );
    let newton_start = match fixed_point {
        Ok((p, _)) => {
            if foc_residual(&p, costs, delta_exogenous, theta, x1, draws) <= FOC_TOLERANCE
                && markups_positive(&p, costs)
            {
                return Ok(p);
            }
            p
        }
        Err(_) => start.clone(),
    };
    let p = newton_fallback(&newton_start, costs, delta_exogenous, theta, x1, draws)
        .map_err(|e| Error::MarketDropped(format!("both price solvers failed: {e}")))?;
    if !markups_positive(&p, costs) {
        return Err(Error::MarketDropped("equilibrium has a nonpositive markup".into()));
    }
    Ok(p)
}
