//! Share integration and analytic share derivatives. Every operation makes a
//! single pass over the consumer draws and accumulates with rank-1 updates,
//! so the same draw matrix prices shares, Jacobians and Hessian blocks
//! consistently.

use super::{validate_share_inputs, ConsumerDraws};
use crate::error::Result;
use nalgebra::{DMatrix, DVector};

/// Visit the per-draw choice probabilities one draw at a time. Utilities are
/// stabilized against the running maximum (outside option at zero) so no
/// finite input can overflow the exponentials.
fn fold_draws<F: FnMut(usize, &DVector<f64>)>(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
    mut visit: F,
) {
    let j = delta.len();
    let l1 = sigma.len();
    let mut u = DVector::zeros(j);
    let mut s = DVector::zeros(j);
    for i in 0..draws.count() {
        u.copy_from(delta);
        for l in 0..l1 {
            let a = sigma[l] * draws.nu[(i, l)];
            if a != 0.0 {
                u.axpy(a, &x1.column(l), 1.0);
            }
        }
        let mut m = 0.0f64;
        for &v in u.iter() {
            if v > m {
                m = v;
            }
        }
        let mut denom = (-m).exp();
        for jj in 0..j {
            let e = (u[jj] - m).exp();
            s[jj] = e;
            denom += e;
        }
        s /= denom;
        visit(i, &s);
    }
}

/// Market shares under taste heterogeneity: the mean over draws of each
/// draw's logit choice probabilities.
pub fn shares(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<DVector<f64>> {
    validate_share_inputs(delta, sigma, x1, draws)?;
    Ok(shares_unchecked(delta, sigma, x1, draws))
}

/// `shares` without input validation, for hot loops that have already
/// checked dimensions once.
pub fn shares_unchecked(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> DVector<f64> {
    let mut acc = DVector::zeros(delta.len());
    fold_draws(delta, sigma, x1, draws, |_, s| acc += s);
    acc / draws.count() as f64
}

/// Shares and their mean-utility Jacobian in one pass, for price solvers
/// that need both at every trial price vector.
pub(crate) fn shares_and_jacobian_unchecked(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> (DVector<f64>, DMatrix<f64>) {
    let j = delta.len();
    let mut s_acc = DVector::zeros(j);
    let mut a_acc = DMatrix::zeros(j, j);
    fold_draws(delta, sigma, x1, draws, |_, s| {
        s_acc += s;
        a_acc.ger(-1.0, s, s, 1.0);
        for jj in 0..j {
            a_acc[(jj, jj)] += s[jj];
        }
    });
    let r = draws.count() as f64;
    (s_acc / r, a_acc / r)
}

/// Jacobian of shares in mean utilities: E[diag(s_i) - s_i s_i'].
pub fn share_jacobian_delta(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<DMatrix<f64>> {
    validate_share_inputs(delta, sigma, x1, draws)?;
    let j = delta.len();
    let mut acc = DMatrix::zeros(j, j);
    fold_draws(delta, sigma, x1, draws, |_, s| {
        acc.ger(-1.0, s, s, 1.0);
        for jj in 0..j {
            acc[(jj, jj)] += s[jj];
        }
    });
    Ok(acc / draws.count() as f64)
}

/// Jacobian of shares in the taste spreads: column l is
/// E[nu_il s_i .* (x1_l - s_i' x1_l)].
pub fn share_dsigma(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<DMatrix<f64>> {
    validate_share_inputs(delta, sigma, x1, draws)?;
    let j = delta.len();
    let l1 = sigma.len();
    let mut acc = DMatrix::zeros(j, l1);
    fold_draws(delta, sigma, x1, draws, |i, s| {
        for l in 0..l1 {
            let col = x1.column(l);
            let xbar = s.dot(&col);
            let nu = draws.nu[(i, l)];
            for jj in 0..j {
                acc[(jj, l)] += nu * s[jj] * (col[jj] - xbar);
            }
        }
    });
    Ok(acc / draws.count() as f64)
}

/// Second derivatives of shares in mean utilities, as one J x J matrix per
/// product: out[j][(k, l)] = d2 S_j / d delta_k d delta_l. Cubic in J per
/// draw; prefer `share_hessian_delta_contract` when only a contraction
/// against a vector is needed.
pub fn share_hessian_delta(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<Vec<DMatrix<f64>>> {
    validate_share_inputs(delta, sigma, x1, draws)?;
    let j = delta.len();
    let mut acc = vec![DMatrix::zeros(j, j); j];
    let mut base = DMatrix::zeros(j, j);
    fold_draws(delta, sigma, x1, draws, |_, s| {
        // Shared across products: 2 s s' - diag(s).
        base.ger(2.0, s, s, 0.0);
        for k in 0..j {
            base[(k, k)] -= s[k];
        }
        for jj in 0..j {
            let sj = s[jj];
            let t = &mut acc[jj];
            *t += &base * sj;
            for k in 0..j {
                t[(jj, k)] -= sj * s[k];
                t[(k, jj)] -= sj * s[k];
            }
            t[(jj, jj)] += sj;
        }
    });
    let r = draws.count() as f64;
    Ok(acc.into_iter().map(|t| t / r).collect())
}

/// Contraction of the share Hessian against a fixed vector,
/// out[(j, l)] = sum_k d2 S_j / d delta_k d delta_l v_k, computed in one
/// quadratic pass per draw: with w = s'v and q = s .* (v - w), each draw
/// contributes diag(q) - q s' - s q'.
pub fn share_hessian_delta_contract(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
    v: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    validate_share_inputs(delta, sigma, x1, draws)?;
    if v.len() != delta.len() {
        return Err(crate::error::Error::Dimension(format!(
            "contraction vector has {} entries for {} products",
            v.len(),
            delta.len()
        )));
    }
    let j = delta.len();
    let mut acc = DMatrix::zeros(j, j);
    let mut q = DVector::zeros(j);
    fold_draws(delta, sigma, x1, draws, |_, s| {
        let w = s.dot(v);
        for jj in 0..j {
            q[jj] = s[jj] * (v[jj] - w);
        }
        acc.ger(-1.0, &q, s, 1.0);
        acc.ger(-1.0, s, &q, 1.0);
        for jj in 0..j {
            acc[(jj, jj)] += q[jj];
        }
    });
    Ok(acc / draws.count() as f64)
}

/// Cross derivatives of the share Jacobian in the taste spreads, one J x J
/// matrix per spread: out[l][(j, k)] = d2 S_j / d sigma_l d delta_k. Each
/// draw contributes nu_il (diag(w) - w s' - s w') with w = s .* (x1_l - xbar).
pub fn share_cross_sigma_delta(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<Vec<DMatrix<f64>>> {
    validate_share_inputs(delta, sigma, x1, draws)?;
    let j = delta.len();
    let l1 = sigma.len();
    let mut acc = vec![DMatrix::zeros(j, j); l1];
    let mut w = DVector::zeros(j);
    fold_draws(delta, sigma, x1, draws, |i, s| {
        for l in 0..l1 {
            let col = x1.column(l);
            let xbar = s.dot(&col);
            let nu = draws.nu[(i, l)];
            for jj in 0..j {
                w[jj] = s[jj] * (col[jj] - xbar);
            }
            let t = &mut acc[l];
            t.ger(-nu, &w, s, 1.0);
            t.ger(-nu, s, &w, 1.0);
            for jj in 0..j {
                t[(jj, jj)] += nu * w[jj];
            }
        }
    });
    let r = draws.count() as f64;
    Ok(acc.into_iter().map(|t| t / r).collect())
}

/// Plain logit shares (zero taste spread), closed form.
pub(crate) fn logit_shares(delta: &DVector<f64>) -> DVector<f64> {
    let mut m = 0.0f64;
    for &v in delta.iter() {
        if v > m {
            m = v;
        }
    }
    let mut s = delta.map(|v| (v - m).exp());
    let denom = (-m).exp() + s.sum();
    s /= denom;
    s
}

/// Small-spread share approximation, quadratic in sigma: plain logit shares
/// scaled by one plus half the spread-weighted excess dispersion of each
/// product's characteristic around the share-weighted mean. The dispersion
/// reference includes the outside option at zero characteristics. Error is
/// cubic in the spreads.
pub fn shares_second_order(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let j = delta.len();
    if x1.nrows() != j || x1.ncols() != sigma.len() {
        return Err(crate::error::Error::Dimension(
            "x1 must be products x spreads".into(),
        ));
    }
    let s = logit_shares(delta);
    let s0 = 1.0 - s.sum();
    let mut corr = DVector::<f64>::zeros(j);
    for l in 0..sigma.len() {
        let col = x1.column(l);
        let xbar = s.dot(&col);
        let mut disp = s0 * xbar * xbar;
        for k in 0..j {
            let d = col[k] - xbar;
            disp += s[k] * d * d;
        }
        let half = 0.5 * sigma[l] * sigma[l];
        for jj in 0..j {
            let d = col[jj] - xbar;
            corr[jj] += half * (d * d - disp);
        }
    }
    Ok(DVector::from_fn(j, |jj, _| s[jj] * (1.0 + corr[jj])))
}
