//! Levels estimator with characteristic-based instruments.
//!
//! Moments average xi_jr * Z_jr over every market past the first period,
//! where xi = D(s; sigma) - alpha p - beta'x and Z collects the cost shock,
//! the product characteristics, and one characteristic instrument per
//! spread. The linear coefficients (alpha, beta) are concentrated out, so
//! the numerical search runs over the spreads alone with analytic moment
//! derivatives.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::infer::FittedMoments;
use crate::estimators::{
    is_recoverable, sigma_grid, sigma_key, soft_objective, softplus, softplus_derivative,
    softplus_inverse, CharIvKind, EstimationResult, GmmProblem, MomentStyle, WeightStyle,
    MAX_GN_ITERATIONS, MAX_QN_ITERATIONS,
};
use crate::instruments::{blp_sum_iv, gh_differentiation_iv, pooled_characteristic_sd, GhVariant};
use crate::mixedlogit::{
    invert_shares, inversion_sigma_gradient, ConsumerDraws, Market, Theta,
};
use crate::solvers::{
    gauss_newton, gradient_fallback_threshold, quasi_newton, step_tolerance, FixedPointConfig,
    Method, OptimizerReport,
};

impl CharIvKind {
    fn label(self) -> &'static str {
        match self {
            CharIvKind::BlpSum => "blp-sum",
            CharIvKind::GhQuadratic => "gh-quadratic",
            CharIvKind::GhLocal => "gh-local",
        }
    }
}

/// Inverted utilities at one spread point, kept per market for derivative
/// reuse and stacked for the moment algebra.
struct SigmaPoint {
    per_market: Vec<DVector<f64>>,
    stacked: DVector<f64>,
}

/// The levels moment system with everything that does not depend on sigma
/// precomputed: stacked data matrices, the weight, and the small-matrix
/// pieces of the concentration map.
struct LevelSystem<'a> {
    markets: Vec<&'a Market>,
    draws: &'a ConsumerDraws,
    l1: usize,
    n: usize,
    z: DMatrix<f64>,
    design: DMatrix<f64>,
    weight: DMatrix<f64>,
    /// Z'X, reused by the moment algebra and the parameter jacobian.
    zx: DMatrix<f64>,
    /// Maps Z'D to the concentrated (alpha, beta).
    coef: DMatrix<f64>,
    /// Annihilator I - Z'X coef: maps Z'D to N * h_N.
    annihilator: DMatrix<f64>,
    row_market: Vec<usize>,
    deltas: RefCell<HashMap<Vec<u64>, Rc<SigmaPoint>>>,
    gradients: RefCell<HashMap<Vec<u64>, Rc<DMatrix<f64>>>>,
}

impl<'a> LevelSystem<'a> {
    fn new(problem: &GmmProblem<'a>, kind: CharIvKind) -> Result<Self> {
        let markets = problem.level_markets()?;
        let draws = problem.draws;
        let l1 = draws.dims();
        let x_cols = markets[0].x.ncols();
        if markets.iter().any(|m| m.x.ncols() != x_cols || m.x1.ncols() != l1) {
            return Err(Error::Dimension(
                "all markets must share the characteristic layout".into(),
            ));
        }

        let kappa = pooled_characteristic_sd(&markets)?;
        let mut iv_blocks = Vec::with_capacity(markets.len());
        for m in &markets {
            let block = match kind {
                CharIvKind::BlpSum => blp_sum_iv(m),
                CharIvKind::GhQuadratic => gh_differentiation_iv(m, GhVariant::Quadratic, &kappa)?,
                CharIvKind::GhLocal => gh_differentiation_iv(m, GhVariant::Local, &kappa)?,
            };
            iv_blocks.push(block);
        }

        let n: usize = markets.iter().map(|m| m.products()).sum();
        let q = 1 + x_cols + l1;
        let k = 1 + x_cols;
        // One moment per linear parameter plus one per spread: just identified.
        assert_eq!(q, k + l1, "moment count must equal parameter count");

        let mut z = DMatrix::zeros(n, q);
        let mut design = DMatrix::zeros(n, k);
        let mut row_market = Vec::with_capacity(n);
        let mut row = 0usize;
        for (idx, m) in markets.iter().enumerate() {
            for j in 0..m.products() {
                z[(row, 0)] = m.g[j];
                design[(row, 0)] = m.p[j];
                for c in 0..x_cols {
                    z[(row, 1 + c)] = m.x[(j, c)];
                    design[(row, 1 + c)] = m.x[(j, c)];
                }
                for l in 0..l1 {
                    z[(row, 1 + x_cols + l)] = iv_blocks[idx][(j, l)];
                }
                row_market.push(idx);
                row += 1;
            }
        }

        let cross = (z.transpose() * &z) / n as f64;
        let weight = cross.try_inverse().ok_or_else(|| {
            Error::RankDeficient(format!(
                "instrument cross-product singular ({})",
                kind.label()
            ))
        })?;
        let zx = z.transpose() * &design;
        let projected = zx.transpose() * &weight * &zx;
        let projected_inv = projected.try_inverse().ok_or_else(|| {
            Error::RankDeficient(format!(
                "projected design singular; {} instruments too weak for the regressors",
                kind.label()
            ))
        })?;
        let coef = projected_inv * zx.transpose() * &weight;
        let annihilator = DMatrix::identity(q, q) - &zx * &coef;

        Ok(LevelSystem {
            markets,
            draws,
            l1,
            n,
            z,
            design,
            weight,
            zx,
            coef,
            annihilator,
            row_market,
            deltas: RefCell::new(HashMap::new()),
            gradients: RefCell::new(HashMap::new()),
        })
    }

    /// Share inversions at one spread point, cached by exact bit pattern.
    /// Every inversion starts cold so the result is a pure function of
    /// sigma, independent of the search path that requested it.
    fn sigma_point(&self, sigma: &DVector<f64>) -> Result<Rc<SigmaPoint>> {
        let key = sigma_key(sigma);
        if let Some(hit) = self.deltas.borrow().get(&key) {
            return Ok(Rc::clone(hit));
        }
        let config = FixedPointConfig::default();
        let per_market: Vec<DVector<f64>> = self
            .markets
            .par_iter()
            .map(|m| {
                invert_shares(&m.s, m.s0, sigma, &m.x1, self.draws, &config)
                    .map(|(delta, _)| delta)
            })
            .collect::<Result<_>>()?;
        let mut stacked = DVector::zeros(self.n);
        let mut row = 0usize;
        for d in &per_market {
            stacked.rows_mut(row, d.len()).copy_from(d);
            row += d.len();
        }
        let point = Rc::new(SigmaPoint { per_market, stacked });
        self.deltas.borrow_mut().insert(key, Rc::clone(&point));
        Ok(point)
    }

    /// Stacked spread-gradient of the inverse share map at one sigma.
    fn sigma_gradient(&self, sigma: &DVector<f64>) -> Result<Rc<DMatrix<f64>>> {
        let key = sigma_key(sigma);
        if let Some(hit) = self.gradients.borrow().get(&key) {
            return Ok(Rc::clone(hit));
        }
        let point = self.sigma_point(sigma)?;
        let blocks: Vec<DMatrix<f64>> = self
            .markets
            .par_iter()
            .zip(point.per_market.par_iter())
            .map(|(m, delta)| inversion_sigma_gradient(delta, sigma, &m.x1, self.draws))
            .collect::<Result<_>>()?;
        let mut stacked = DMatrix::zeros(self.n, self.l1);
        let mut row = 0usize;
        for b in &blocks {
            stacked.rows_mut(row, b.nrows()).copy_from(b);
            row += b.nrows();
        }
        let grad = Rc::new(stacked);
        self.gradients.borrow_mut().insert(key, Rc::clone(&grad));
        Ok(grad)
    }

    /// Concentrated moments and linear coefficients at one sigma.
    fn moments_and_phi(&self, sigma: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let point = self.sigma_point(sigma)?;
        let v = self.z.transpose() * &point.stacked;
        let phi = &self.coef * &v;
        let h = (&self.annihilator * v) / self.n as f64;
        Ok((h, phi))
    }

    /// Analytic sigma-jacobian of the concentrated moments.
    fn moment_jacobian(&self, sigma: &DVector<f64>) -> Result<DMatrix<f64>> {
        let grad = self.sigma_gradient(sigma)?;
        let v = self.z.transpose() * grad.as_ref();
        Ok((&self.annihilator * v) / self.n as f64)
    }

    fn objective(&self, sigma: &DVector<f64>) -> Result<f64> {
        let (h, _) = self.moments_and_phi(sigma)?;
        Ok(0.5 * h.dot(&(&self.weight * &h)))
    }

    /// Moment-level pieces at the solution for standard errors.
    fn fitted(&self, sigma: &DVector<f64>, phi: &DVector<f64>) -> Result<FittedMoments> {
        let point = self.sigma_point(sigma)?;
        let grad = self.sigma_gradient(sigma)?;
        let resid = &point.stacked - &self.design * phi;
        let q = self.z.ncols();
        let mut contributions = DMatrix::zeros(self.n, q);
        for i in 0..self.n {
            for c in 0..q {
                contributions[(i, c)] = self.z[(i, c)] * resid[i];
            }
        }
        let mut jacobian = DMatrix::zeros(q, self.l1 + self.design.ncols());
        let dsig = (self.z.transpose() * grad.as_ref()) / self.n as f64;
        jacobian.columns_mut(0, self.l1).copy_from(&dsig);
        jacobian
            .columns_mut(self.l1, self.design.ncols())
            .copy_from(&(-&self.zx / self.n as f64));
        let mut names: Vec<String> = (1..=self.l1).map(|l| format!("sigma{l}")).collect();
        names.push("alpha".into());
        names.extend((0..self.design.ncols() - 1).map(|c| format!("beta{c}")));
        Ok(FittedMoments {
            parameter_names: names,
            contributions,
            cluster: self.row_market.clone(),
            jacobian,
            weight: self.weight.clone(),
            shock_level: None,
        })
    }
}

/// Estimate (sigma, alpha, beta) from late-period levels with
/// characteristic-based instruments: grid stage over the spreads,
/// Gauss-Newton on the concentrated moments in softplus coordinates, and a
/// quasi-Newton fallback from the same start when Gauss-Newton stalls or
/// leaves a gradient above the fallback threshold.
pub fn estimate_char_iv(problem: &GmmProblem, kind: CharIvKind) -> Result<EstimationResult> {
    let clock = Instant::now();
    if problem.moment_style != MomentStyle::LevelsPeriod2
        || problem.weight_style != WeightStyle::ZwzInverse
    {
        return Err(Error::InvalidInput(
            "characteristic-IV estimation expects late-period levels with the inverse \
             cross-product weight"
                .into(),
        ));
    }
    let system = LevelSystem::new(problem, kind)?;
    let l1 = system.l1;

    let mut best: Option<(f64, DVector<f64>)> = None;
    for sigma in sigma_grid(l1)? {
        match system.objective(&sigma) {
            Ok(q) => {
                if best.as_ref().map_or(true, |(b, _)| q < *b) {
                    best = Some((q, sigma));
                }
            }
            Err(e) if is_recoverable(&e) => continue,
            Err(e) => return Err(e),
        }
    }
    let (grid_objective, sigma0) = best.ok_or_else(|| {
        Error::NonConvergence("no spread grid point produced a finite objective".into())
    })?;
    // The grid never lands exactly on the zero boundary, but guard the
    // inverse transform anyway.
    let t0 = DVector::from_fn(l1, |i, _| softplus_inverse(sigma0[i].max(1e-8)));

    let to_sigma = |t: &DVector<f64>| DVector::from_fn(l1, |i, _| softplus(t[i]));
    let gn = gauss_newton(
        |t| system.moments_and_phi(&to_sigma(t)).map(|(h, _)| h),
        |t| {
            let jac = system.moment_jacobian(&to_sigma(t))?;
            let mut chained = jac;
            for i in 0..l1 {
                let scale = softplus_derivative(t[i]);
                chained.column_mut(i).scale_mut(scale);
            }
            Ok(chained)
        },
        &system.weight,
        &t0,
        step_tolerance(),
        MAX_GN_ITERATIONS,
    );

    let accepted = match gn {
        Ok((t_hat, report))
            if report.converged
                && report.final_gradient_norm <= gradient_fallback_threshold() =>
        {
            Some((t_hat, report))
        }
        Ok(_) => None,
        Err(e) if is_recoverable(&e) => None,
        Err(e) => return Err(e),
    };

    let solved = match accepted {
        Some(pair) => Some(pair),
        None => {
            let fallback = quasi_newton(
                |t| match system.objective(&to_sigma(t)) {
                    Ok(v) => Ok(v),
                    Err(e) => soft_objective(e),
                },
                &t0,
                gradient_fallback_threshold(),
                MAX_QN_ITERATIONS,
            );
            match fallback {
                Ok(pair) => Some(pair),
                Err(e) if is_recoverable(&e) => None,
                Err(e) => return Err(e),
            }
        }
    };

    let (sigma_hat, report) = match solved {
        Some((t_hat, report)) => (to_sigma(&t_hat), report),
        None => (
            sigma0.clone(),
            OptimizerReport {
                converged: false,
                iterations: 0,
                final_step_norm: f64::INFINITY,
                final_gradient_norm: f64::INFINITY,
                objective: grid_objective,
                method_used: Method::QuasiNewtonFallback,
            },
        ),
    };

    let (phi, fitted) = match system.moments_and_phi(&sigma_hat) {
        Ok((_, phi)) => {
            let fitted = match system.fitted(&sigma_hat, &phi) {
                Ok(f) => Some(f),
                Err(e) if is_recoverable(&e) => None,
                Err(e) => return Err(e),
            };
            (Some(phi), fitted)
        }
        Err(e) if is_recoverable(&e) => (None, None),
        Err(e) => return Err(e),
    };
    let (alpha_hat, beta_hat) = match &phi {
        Some(phi) => (phi[0], Some(DVector::from(phi.rows(1, phi.len() - 1)))),
        // Concentration failed at the reported point; fall back to the
        // degenerate marker so the flagged result still has a shape.
        None => (f64::NAN, None),
    };

    // Estimates are reported as-is: the levels path does not constrain the
    // concentrated price coefficient's sign, so skip the model validator.
    let theta_hat = Theta { alpha: alpha_hat, sigma: sigma_hat };
    Ok(EstimationResult {
        theta_hat,
        beta_hat,
        objective_value: report.objective,
        report,
        grid_start: sigma0,
        se: None,
        wall_time: clock.elapsed(),
        fitted,
        outer: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixedlogit::shares;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Markets whose utilities satisfy the model with xi = 0 exactly, so
    /// the true parameters zero every moment condition and the estimator
    /// must return them.
    fn exact_panel(
        sigma: &DVector<f64>,
        alpha: f64,
        beta: &DVector<f64>,
        draws: &ConsumerDraws,
        zero_shocks: bool,
    ) -> Vec<Market> {
        let mut rng = ChaCha12Rng::seed_from_u64(551);
        let mut markets = Vec::new();
        for region in 0..3 {
            let j = 8;
            let x1 = DMatrix::from_fn(j, 2, |_, _| rng.gen_range(-1.2..1.2));
            let mut x = DMatrix::from_element(j, 3, 1.0);
            x.columns_mut(1, 2).copy_from(&x1);
            let p = DVector::from_fn(j, |row, _| 2.5 + 0.35 * row as f64 + rng.gen_range(0.0..0.4));
            let g = if zero_shocks {
                DVector::zeros(j)
            } else {
                DVector::from_fn(j, |_, _| rng.gen_range(-0.5..0.5))
            };
            let delta = &x * beta + &p * alpha;
            let s = shares(&delta, sigma, &x1, draws).unwrap();
            let s0 = 1.0 - s.sum();
            markets.push(Market::new(region, 2, x, x1, p, s, s0, g).unwrap());
        }
        markets
    }

    #[test]
    fn exact_model_is_recovered_through_the_gauss_newton_path() {
        let draws = ConsumerDraws::scrambled_halton(2, 80).unwrap();
        let sigma = DVector::from_vec(vec![0.8, 1.2]);
        let beta = DVector::from_vec(vec![2.0, 1.0, -0.7]);
        let markets = exact_panel(&sigma, -1.5, &beta, &draws, false);
        let problem = GmmProblem::characteristic(&markets, &draws);
        assert_eq!(problem.moment_style, MomentStyle::LevelsPeriod2);

        for kind in [CharIvKind::BlpSum, CharIvKind::GhQuadratic] {
            let fit = estimate_char_iv(&problem, kind).unwrap();
            assert!(fit.report.converged, "{kind:?} did not converge");
            assert_eq!(fit.report.method_used, Method::GaussNewton);
            assert_relative_eq!(fit.theta_hat.sigma[0], 0.8, epsilon = 1e-5);
            assert_relative_eq!(fit.theta_hat.sigma[1], 1.2, epsilon = 1e-5);
            assert_relative_eq!(fit.theta_hat.alpha, -1.5, epsilon = 1e-6);
            let beta_hat = fit.beta_hat.as_ref().unwrap();
            assert_relative_eq!(beta_hat, &beta, epsilon = 1e-6);
            assert!(fit.objective_value <= 1e-14, "objective {}", fit.objective_value);
            let fitted = fit.fitted.as_ref().unwrap();
            assert_eq!(fitted.contributions.ncols(), 6);
            assert_eq!(fitted.jacobian.shape(), (6, 6));
            assert_eq!(
                fitted.parameter_names,
                vec!["sigma1", "sigma2", "alpha", "beta0", "beta1", "beta2"]
            );
        }
    }

    #[test]
    fn restarting_from_the_solution_converges_immediately() {
        let draws = ConsumerDraws::scrambled_halton(2, 60).unwrap();
        let sigma = DVector::from_vec(vec![0.9, 0.5]);
        let beta = DVector::from_vec(vec![1.5, 0.8, -0.4]);
        let markets = exact_panel(&sigma, -1.2, &beta, &draws, false);
        let problem = GmmProblem::characteristic(&markets, &draws);
        let fit = estimate_char_iv(&problem, CharIvKind::GhQuadratic).unwrap();
        assert!(fit.report.converged);

        let system = LevelSystem::new(&problem, CharIvKind::GhQuadratic).unwrap();
        let l1 = system.l1;
        let t_hat =
            DVector::from_fn(l1, |i, _| softplus_inverse(fit.theta_hat.sigma[i].max(1e-12)));
        let to_sigma = |t: &DVector<f64>| DVector::from_fn(l1, |i, _| softplus(t[i]));
        let (_, restart) = gauss_newton(
            |t| system.moments_and_phi(&to_sigma(t)).map(|(h, _)| h),
            |t| {
                let mut jac = system.moment_jacobian(&to_sigma(t))?;
                for i in 0..l1 {
                    jac.column_mut(i).scale_mut(softplus_derivative(t[i]));
                }
                Ok(jac)
            },
            &system.weight,
            &t_hat,
            step_tolerance(),
            MAX_GN_ITERATIONS,
        )
        .unwrap();
        assert!(restart.converged);
        assert!(restart.iterations <= 2, "took {} steps", restart.iterations);
    }

    #[test]
    fn first_period_only_panels_are_missing_data() {
        let draws = ConsumerDraws::scrambled_halton(2, 40).unwrap();
        let sigma = DVector::from_vec(vec![0.5, 0.5]);
        let beta = DVector::from_vec(vec![1.0, 0.5, 0.5]);
        let mut markets = exact_panel(&sigma, -1.0, &beta, &draws, false);
        for m in &mut markets {
            m.period = 1;
        }
        let problem = GmmProblem::characteristic(&markets, &draws);
        assert!(matches!(
            estimate_char_iv(&problem, CharIvKind::BlpSum).unwrap_err(),
            Error::MissingData(_)
        ));
    }

    #[test]
    fn zero_shock_column_makes_the_weight_singular() {
        let draws = ConsumerDraws::scrambled_halton(2, 40).unwrap();
        let sigma = DVector::from_vec(vec![0.5, 0.5]);
        let beta = DVector::from_vec(vec![1.0, 0.5, 0.5]);
        let markets = exact_panel(&sigma, -1.0, &beta, &draws, true);
        let problem = GmmProblem::characteristic(&markets, &draws);
        let err = estimate_char_iv(&problem, CharIvKind::BlpSum).unwrap_err();
        match err {
            Error::RankDeficient(msg) => assert!(msg.contains("blp-sum"), "message: {msg}"),
            other => panic!("expected rank error, got {other:?}"),
        }
    }
}
