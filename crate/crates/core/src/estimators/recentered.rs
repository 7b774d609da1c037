//! First-difference estimators with recentered shock instruments.
//!
//! Both procedures work off the residual dxi = dD(sigma) - alpha dp over
//! adjacent-period pairs, with a three-column instrument set: the scaled
//! cost shock for the price moment plus one recentered shock prediction per
//! spread. The continuously-updating estimator rebuilds the instruments at
//! every trial parameter, so its moment derivatives are finite differences;
//! the iterative estimator freezes the instruments at the previous outer
//! step, concentrates the price coefficient out of the demeaned system, and
//! searches the spreads with analytic derivatives.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::infer::{FittedMoments, ShockLevelPieces};
use crate::estimators::{
    concentrate_linear, is_recoverable, sigma_grid, sigma_key, soft_objective, softplus,
    softplus_derivative, softplus_inverse, EstimationResult, GmmProblem, MomentStyle, OuterStep,
    RecenteredIvKind, WeightStyle, MAX_GN_ITERATIONS, MAX_QN_ITERATIONS,
};
use crate::instruments::{
    build_ssiv, estimate_pass_through, fiv_prediction, recenter_by_permutation,
    ssiv_weights_at_delta, PassThrough, PermutationScope, SsivWeights,
};
use crate::mixedlogit::{invert_shares, inversion_sigma_gradient, ConsumerDraws, Market, Theta};
use crate::solvers::{
    finite_difference_jacobian, gauss_newton, gradient_fallback_threshold, quasi_newton,
    step_tolerance, FixedPointConfig, Method, OptimizerReport,
};

/// The search transform needs a strictly negative price coefficient to
/// start from; wrong-signed first-stage slopes are clamped here.
const ALPHA_START_CEILING: f64 = -1e-2;

/// Inverted mean utilities for every pair at one spread point.
struct PairPoint {
    early: Vec<DVector<f64>>,
    late: Vec<DVector<f64>>,
    /// Stacked late-minus-early differences across all pairs.
    diff: DVector<f64>,
}

/// The first-difference moment system: pair data stacked once, plus caches
/// for everything that is a pure function of the trial parameters.
struct DiffSystem<'a> {
    pairs: Vec<(&'a Market, &'a Market)>,
    draws: &'a ConsumerDraws,
    kind: RecenteredIvKind,
    permutations: usize,
    seed: u64,
    l1: usize,
    n: usize,
    /// Stacked price differences.
    dp: DVector<f64>,
    /// Late-period cost shocks per pair; the actuals the recentering permutes.
    shocks: Vec<DVector<f64>>,
    shocks_stacked: DVector<f64>,
    row_pair: Vec<usize>,
    pi_check: f64,
    point_cache: RefCell<HashMap<Vec<u64>, Rc<PairPoint>>>,
    grad_cache: RefCell<HashMap<Vec<u64>, Rc<DMatrix<f64>>>>,
    ssiv_cache: RefCell<HashMap<Vec<u64>, Rc<Vec<SsivWeights>>>>,
    fiv_cache: RefCell<HashMap<Vec<u64>, Rc<Vec<DMatrix<f64>>>>>,
}

impl<'a> DiffSystem<'a> {
    fn new(
        problem: &GmmProblem<'a>,
        kind: RecenteredIvKind,
        permutations: usize,
        seed: u64,
        pass: Option<&PassThrough>,
    ) -> Result<Self> {
        let pairs = problem.adjacent_pairs()?;
        let draws = problem.draws;
        let l1 = draws.dims();
        if pairs.iter().any(|(e, l)| e.x1.ncols() != l1 || l.x1.ncols() != l1) {
            return Err(Error::Dimension(
                "markets must carry one random-coefficient column per draw dimension".into(),
            ));
        }
        if kind == RecenteredIvKind::ExactPrediction && permutations == 0 {
            return Err(Error::InvalidInput(
                "exact-prediction recentering needs at least one permutation".into(),
            ));
        }

        let n: usize = pairs.iter().map(|(_, late)| late.products()).sum();
        // The shock column plus one prediction per spread, against the
        // spreads plus the price coefficient: just identified.
        let moment_count = 1 + l1;
        let parameter_count = l1 + 1;
        assert_eq!(moment_count, parameter_count, "moment count must equal parameter count");

        let mut dp = DVector::zeros(n);
        let mut shocks_stacked = DVector::zeros(n);
        let mut shocks = Vec::with_capacity(pairs.len());
        let mut row_pair = Vec::with_capacity(n);
        let mut row = 0usize;
        for (idx, (early, late)) in pairs.iter().enumerate() {
            if early.products() != late.products() {
                return Err(Error::Dimension("paired markets disagree on product count".into()));
            }
            for j in 0..late.products() {
                dp[row] = late.p[j] - early.p[j];
                shocks_stacked[row] = late.g[j];
                row_pair.push(idx);
                row += 1;
            }
            shocks.push(late.g.clone());
        }

        // Degenerate shocks make every instrument column identically zero;
        // fail here rather than report a spurious estimate.
        let (lo, hi) = shocks_stacked
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let scale = 1.0 + lo.abs().max(hi.abs());
        if !(hi - lo > 16.0 * f64::EPSILON * scale) {
            return Err(Error::RankDeficient(
                "cost shocks have no variation; recentered instruments are identically zero"
                    .into(),
            ));
        }

        let pi_check = match pass {
            Some(p) => p.pi_check,
            None => estimate_pass_through(&pairs)?.pi_check,
        };
        if !pi_check.is_finite() || pi_check == 0.0 {
            return Err(Error::InvalidInput(
                "pass-through rate must be finite and nonzero".into(),
            ));
        }

        Ok(DiffSystem {
            pairs,
            draws,
            kind,
            permutations,
            seed,
            l1,
            n,
            dp,
            shocks,
            shocks_stacked,
            row_pair,
            pi_check,
            point_cache: RefCell::new(HashMap::new()),
            grad_cache: RefCell::new(HashMap::new()),
            ssiv_cache: RefCell::new(HashMap::new()),
            fiv_cache: RefCell::new(HashMap::new()),
        })
    }

    /// Share inversions for every pair at one spread point, cached by exact
    /// bit pattern. Every inversion starts cold so the result is a pure
    /// function of sigma, independent of the search path that requested it.
    fn pair_point(&self, sigma: &DVector<f64>) -> Result<Rc<PairPoint>> {
        let key = sigma_key(sigma);
        if let Some(hit) = self.point_cache.borrow().get(&key) {
            return Ok(Rc::clone(hit));
        }
        let config = FixedPointConfig::default();
        let draws = self.draws;
        let solved: Vec<(DVector<f64>, DVector<f64>)> = self
            .pairs
            .par_iter()
            .map(|(early, late)| {
                let (de, _) = invert_shares(&early.s, early.s0, sigma, &early.x1, draws, &config)?;
                let (dl, _) = invert_shares(&late.s, late.s0, sigma, &late.x1, draws, &config)?;
                Ok((de, dl))
            })
            .collect::<Result<_>>()?;
        let mut diff = DVector::zeros(self.n);
        let mut early = Vec::with_capacity(solved.len());
        let mut late = Vec::with_capacity(solved.len());
        let mut row = 0usize;
        for (de, dl) in solved {
            for j in 0..dl.len() {
                diff[row] = dl[j] - de[j];
                row += 1;
            }
            early.push(de);
            late.push(dl);
        }
        let point = Rc::new(PairPoint { early, late, diff });
        self.point_cache.borrow_mut().insert(key, Rc::clone(&point));
        Ok(point)
    }

    /// Stacked spread-gradient of the utility differences at one sigma.
    fn diff_gradient(&self, sigma: &DVector<f64>) -> Result<Rc<DMatrix<f64>>> {
        let key = sigma_key(sigma);
        if let Some(hit) = self.grad_cache.borrow().get(&key) {
            return Ok(Rc::clone(hit));
        }
        let point = self.pair_point(sigma)?;
        let draws = self.draws;
        let blocks: Vec<DMatrix<f64>> = self
            .pairs
            .par_iter()
            .zip(point.early.par_iter().zip(point.late.par_iter()))
            .map(|((early, late), (de, dl))| {
                let ge = inversion_sigma_gradient(de, sigma, &early.x1, draws)?;
                let gl = inversion_sigma_gradient(dl, sigma, &late.x1, draws)?;
                Ok(gl - ge)
            })
            .collect::<Result<_>>()?;
        let mut stacked = DMatrix::zeros(self.n, self.l1);
        let mut row = 0usize;
        for b in &blocks {
            stacked.rows_mut(row, b.nrows()).copy_from(b);
            row += b.nrows();
        }
        let grad = Rc::new(stacked);
        self.grad_cache.borrow_mut().insert(key, Rc::clone(&grad));
        Ok(grad)
    }

    /// Shift-share weight blocks per pair at a unit-magnitude price
    /// coefficient. The blocks scale exactly linearly in the price
    /// coefficient, so trial values only rescale the cached result.
    fn ssiv_unit_weights(&self, sigma: &DVector<f64>) -> Result<Rc<Vec<SsivWeights>>> {
        let key = sigma_key(sigma);
        if let Some(hit) = self.ssiv_cache.borrow().get(&key) {
            return Ok(Rc::clone(hit));
        }
        let point = self.pair_point(sigma)?;
        // Built directly: the validating constructor rejects the negative
        // spreads that finite-difference trial points probe.
        let unit = Theta { alpha: -1.0, sigma: sigma.clone() };
        let draws = self.draws;
        let pi_check = self.pi_check;
        let weights: Vec<SsivWeights> = self
            .pairs
            .par_iter()
            .zip(point.early.par_iter())
            .map(|((early, _), delta)| {
                ssiv_weights_at_delta(delta, &early.x1, &unit, pi_check, draws)
            })
            .collect::<Result<_>>()?;
        let rc = Rc::new(weights);
        self.ssiv_cache.borrow_mut().insert(key, Rc::clone(&rc));
        Ok(rc)
    }

    /// Permutation-recentered exact-prediction columns per pair, cached by
    /// the joint (sigma, alpha) bit pattern. The fixed seed regenerates the
    /// same counterfactual assignments on every call, freezing the
    /// recentering across all trial parameters of one estimation.
    fn fiv_columns(&self, sigma: &DVector<f64>, alpha: f64) -> Result<Rc<Vec<DMatrix<f64>>>> {
        let mut key = sigma_key(sigma);
        key.push(alpha.to_bits());
        if let Some(hit) = self.fiv_cache.borrow().get(&key) {
            return Ok(Rc::clone(hit));
        }
        let point = self.pair_point(sigma)?;
        let early: Vec<DVector<f64>> = point.early.clone();
        let theta = Theta { alpha, sigma: sigma.clone() };
        let pairs = &self.pairs;
        let draws = self.draws;
        let pi_check = self.pi_check;
        let values_fn = move |shocks: &[DVector<f64>]| -> Result<Vec<DMatrix<f64>>> {
            pairs
                .iter()
                .zip(&early)
                .zip(shocks)
                .map(|(((_, late), delta), g)| fiv_prediction(late, &theta, pi_check, delta, g, draws))
                .collect()
        };
        let blocks = recenter_by_permutation(
            values_fn,
            &self.shocks,
            self.permutations,
            PermutationScope::AcrossAll,
            self.seed,
        )?;
        let rc = Rc::new(blocks);
        self.fiv_cache.borrow_mut().insert(key, Rc::clone(&rc));
        Ok(rc)
    }

    /// Stacked instrument matrix at one trial parameter: the scaled shock in
    /// column 0 and the recentered predictions in the spread columns.
    fn instrument_matrix(&self, sigma: &DVector<f64>, alpha: f64) -> Result<DMatrix<f64>> {
        let q = 1 + self.l1;
        let mut z = DMatrix::zeros(self.n, q);
        match self.kind {
            RecenteredIvKind::ShiftShare => {
                let units = self.ssiv_unit_weights(sigma)?;
                let mut row = 0usize;
                for (p, (_, late)) in self.pairs.iter().enumerate() {
                    let j = late.products();
                    let scaled = SsivWeights {
                        per_sigma: units[p].per_sigma.iter().map(|w| w * -alpha).collect(),
                        pi_check: self.pi_check,
                    };
                    // Shock means are known to be zero by design here.
                    let block = build_ssiv(late, &scaled, &DVector::zeros(j))?;
                    z.view_mut((row, 0), (j, q)).copy_from(&block);
                    row += j;
                }
            }
            RecenteredIvKind::ExactPrediction => {
                let blocks = self.fiv_columns(sigma, alpha)?;
                let mut row = 0usize;
                for (p, (_, late)) in self.pairs.iter().enumerate() {
                    let j = late.products();
                    for jj in 0..j {
                        z[(row + jj, 0)] = -self.pi_check * late.g[jj];
                    }
                    z.view_mut((row, 1), (j, self.l1)).copy_from(&blocks[p]);
                    row += j;
                }
            }
        }
        Ok(z)
    }

    /// Raw (continuously-updating) moments at one trial parameter.
    fn cu_moments(&self, sigma: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
        let point = self.pair_point(sigma)?;
        let z = self.instrument_matrix(sigma, alpha)?;
        let xi = &point.diff - &self.dp * alpha;
        Ok(z.transpose() * xi / self.n as f64)
    }

    /// Instrumental-variables slope of the utility differences on the price
    /// differences (with an intercept), instrumented by the cost shocks:
    /// the starting price coefficient that zeros the shock moment.
    fn first_stage_slope(&self, diff: &DVector<f64>) -> Result<f64> {
        let g_mean = self.shocks_stacked.mean();
        let d_mean = diff.mean();
        let p_mean = self.dp.mean();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..self.n {
            let gd = self.shocks_stacked[i] - g_mean;
            num += gd * (diff[i] - d_mean);
            den += gd * (self.dp[i] - p_mean);
        }
        let slope = num / den;
        if slope.is_finite() {
            Ok(slope)
        } else {
            Err(Error::NonFinite(
                "first-stage slope of utility changes on price changes".into(),
            ))
        }
    }

    fn grid_value(&self, sigma: &DVector<f64>) -> Result<(f64, f64)> {
        let point = self.pair_point(sigma)?;
        let alpha = self.first_stage_slope(&point.diff)?;
        let h = self.cu_moments(sigma, alpha)?;
        Ok((0.5 * h.norm_squared(), alpha))
    }

    /// Best of the spread grid: objective, spreads, and the first-stage
    /// price coefficient there.
    fn grid_start(&self) -> Result<(f64, DVector<f64>, f64)> {
        let mut best: Option<(f64, DVector<f64>, f64)> = None;
        for sigma in sigma_grid(self.l1)? {
            match self.grid_value(&sigma) {
                Ok((q, alpha)) => {
                    if best.as_ref().map_or(true, |(b, _, _)| q < *b) {
                        best = Some((q, sigma, alpha));
                    }
                }
                Err(e) if is_recoverable(&e) => continue,
                Err(e) => return Err(e),
            }
        }
        best.ok_or_else(|| {
            Error::NonConvergence("no spread grid point produced a finite objective".into())
        })
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.l1).map(|l| format!("sigma{l}")).collect();
        names.push("alpha".into());
        names
    }

    /// Moment-level pieces of the continuously-updating system at a
    /// solution, with numeric parameter derivatives because the instruments
    /// move with the parameters.
    fn cu_fitted(&self, sigma: &DVector<f64>, alpha: f64) -> Result<FittedMoments> {
        let point = self.pair_point(sigma)?;
        let z = self.instrument_matrix(sigma, alpha)?;
        let xi = &point.diff - &self.dp * alpha;
        let q = 1 + self.l1;
        let mut contributions = DMatrix::zeros(self.n, q);
        for i in 0..self.n {
            for c in 0..q {
                contributions[(i, c)] = z[(i, c)] * xi[i];
            }
        }
        let mut natural = DVector::zeros(q);
        natural.rows_mut(0, self.l1).copy_from(sigma);
        natural[self.l1] = alpha;
        let jacobian = finite_difference_jacobian(
            &mut |v: &DVector<f64>| {
                let s = DVector::from_fn(self.l1, |i, _| v[i]);
                self.cu_moments(&s, v[self.l1])
            },
            &natural,
        )?;
        let shock_level = match self.kind {
            RecenteredIvKind::ShiftShare => Some(self.shift_share_pieces(sigma, alpha, &xi)?),
            RecenteredIvKind::ExactPrediction => None,
        };
        Ok(FittedMoments {
            parameter_names: self.parameter_names(),
            contributions,
            cluster: self.row_pair.clone(),
            jacobian,
            weight: DMatrix::identity(q, q),
            shock_level,
        })
    }

    /// Per-pair weight blocks writing each moment row as a weighted sum of
    /// the late-period shocks, for shock-level inference.
    fn shift_share_pieces(
        &self,
        sigma: &DVector<f64>,
        alpha: f64,
        xi: &DVector<f64>,
    ) -> Result<ShockLevelPieces> {
        let units = self.ssiv_unit_weights(sigma)?;
        let mut weights = Vec::with_capacity(self.pairs.len());
        let mut residuals = Vec::with_capacity(self.pairs.len());
        let mut row = 0usize;
        for (p, (_, late)) in self.pairs.iter().enumerate() {
            let j = late.products();
            let mut blocks = Vec::with_capacity(1 + self.l1);
            blocks.push(DMatrix::identity(j, j) * -self.pi_check);
            for l in 0..self.l1 {
                blocks.push(&units[p].per_sigma[l] * -alpha);
            }
            weights.push(blocks);
            residuals.push(DVector::from_fn(j, |i, _| xi[row + i]));
            row += j;
        }
        Ok(ShockLevelPieces { weights, shocks: self.shocks.clone(), residuals })
    }
}

fn demean_vector(v: &DVector<f64>) -> DVector<f64> {
    let m = v.mean();
    v.map(|x| x - m)
}

fn demean_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for c in 0..m.ncols() {
        let mean = m.column(c).mean();
        out.column_mut(c).add_scalar_mut(-mean);
    }
    out
}

fn guard_style(problem: &GmmProblem) -> Result<()> {
    if problem.moment_style != MomentStyle::FirstDifferences
        || problem.weight_style != WeightStyle::Identity
    {
        return Err(Error::InvalidInput(
            "recentered estimation expects first-difference moments with the identity weight"
                .into(),
        ));
    }
    Ok(())
}

/// Estimate (sigma, alpha) from first differences with recentered shock
/// instruments rebuilt at every trial parameter: grid stage over the
/// spreads with the first-stage price coefficient, Gauss-Newton over both
/// parameters in transformed coordinates with finite-difference moment
/// derivatives, and a quasi-Newton fallback from the same start. The
/// pass-through rate is fitted from the panel; `permutations` and `seed`
/// only matter for the exact-prediction instruments.
pub fn estimate_cu_recentered(
    problem: &GmmProblem,
    kind: RecenteredIvKind,
    permutations: usize,
    seed: u64,
) -> Result<EstimationResult> {
    cu_impl(problem, kind, permutations, seed, None)
}

/// [`estimate_cu_recentered`] with a caller-supplied pass-through rate
/// instead of the fitted one.
pub fn estimate_cu_recentered_with(
    problem: &GmmProblem,
    kind: RecenteredIvKind,
    permutations: usize,
    seed: u64,
    pass_through: &PassThrough,
) -> Result<EstimationResult> {
    cu_impl(problem, kind, permutations, seed, Some(pass_through))
}

fn cu_impl(
    problem: &GmmProblem,
    kind: RecenteredIvKind,
    permutations: usize,
    seed: u64,
    pass: Option<&PassThrough>,
) -> Result<EstimationResult> {
    let clock = Instant::now();
    guard_style(problem)?;
    let system = DiffSystem::new(problem, kind, permutations, seed, pass)?;
    let l1 = system.l1;

    let (grid_objective, sigma0, alpha_slope) = system.grid_start()?;
    let alpha0 = alpha_slope.min(ALPHA_START_CEILING);
    let mut t0 = DVector::zeros(l1 + 1);
    for i in 0..l1 {
        t0[i] = softplus_inverse(sigma0[i].max(1e-8));
    }
    t0[l1] = softplus_inverse(-alpha0);

    let split = |t: &DVector<f64>| -> (DVector<f64>, f64) {
        (DVector::from_fn(l1, |i, _| softplus(t[i])), -softplus(t[l1]))
    };
    let residual = |t: &DVector<f64>| -> Result<DVector<f64>> {
        let (sigma, alpha) = split(t);
        system.cu_moments(&sigma, alpha)
    };
    let weight = DMatrix::identity(l1 + 1, l1 + 1);

    let gn = gauss_newton(
        |t: &DVector<f64>| residual(t),
        |t: &DVector<f64>| finite_difference_jacobian(&mut |u: &DVector<f64>| residual(u), t),
        &weight,
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
                |t: &DVector<f64>| match residual(t) {
                    Ok(h) => Ok(0.5 * h.norm_squared()),
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

    let (sigma_hat, alpha_hat, report) = match solved {
        Some((t_hat, report)) => {
            let (sigma, alpha) = split(&t_hat);
            (sigma, alpha, report)
        }
        None => (
            sigma0.clone(),
            alpha0,
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

    let fitted = match system.cu_fitted(&sigma_hat, alpha_hat) {
        Ok(f) => Some(f),
        Err(e) if is_recoverable(&e) => None,
        Err(e) => return Err(e),
    };

    let mut grid_start = DVector::zeros(l1 + 1);
    grid_start.rows_mut(0, l1).copy_from(&sigma0);
    grid_start[l1] = alpha0;

    // Signs are transform-enforced, so the validating constructor is
    // redundant here and would reject nothing the search can produce.
    let theta_hat = Theta { alpha: alpha_hat, sigma: sigma_hat };
    Ok(EstimationResult {
        theta_hat,
        beta_hat: None,
        objective_value: report.objective,
        report,
        grid_start,
        se: None,
        wall_time: clock.elapsed(),
        fitted,
        outer: None,
    })
}

/// Estimate (sigma, alpha) by the iterative scheme: instruments frozen at
/// the previous step's parameters, the price coefficient concentrated out
/// of the demeaned system, analytic spread derivatives inside each inner
/// search, and outer updates until the spreads stop moving.
pub fn estimate_iterative_recentered(
    problem: &GmmProblem,
    kind: RecenteredIvKind,
    permutations: usize,
    seed: u64,
    max_outer: usize,
) -> Result<EstimationResult> {
    let clock = Instant::now();
    guard_style(problem)?;
    let system = DiffSystem::new(problem, kind, permutations, seed, None)?;
    let (_, sigma0, alpha_slope) = system.grid_start()?;
    let alpha0 = alpha_slope.min(ALPHA_START_CEILING);
    let mut grid_start = DVector::zeros(system.l1 + 1);
    grid_start.rows_mut(0, system.l1).copy_from(&sigma0);
    grid_start[system.l1] = alpha0;
    let start = Theta { alpha: alpha0, sigma: sigma0 };
    run_outer(&system, start, max_outer, grid_start, clock)
}

/// [`estimate_iterative_recentered`] from a caller-supplied starting point
/// and pass-through rate, skipping the grid stage. With `max_outer = 1`
/// this is a classical two-step estimate at instruments frozen at `start`.
pub fn estimate_iterative_recentered_from(
    problem: &GmmProblem,
    kind: RecenteredIvKind,
    permutations: usize,
    seed: u64,
    max_outer: usize,
    start: &Theta,
    pass_through: &PassThrough,
) -> Result<EstimationResult> {
    let clock = Instant::now();
    guard_style(problem)?;
    let system = DiffSystem::new(problem, kind, permutations, seed, Some(pass_through))?;
    if start.sigma.len() != system.l1 {
        return Err(Error::Dimension(
            "starting spreads must match the draw dimension".into(),
        ));
    }
    let mut grid_start = DVector::zeros(system.l1 + 1);
    grid_start.rows_mut(0, system.l1).copy_from(&start.sigma);
    grid_start[system.l1] = start.alpha;
    run_outer(&system, start.clone(), max_outer, grid_start, clock)
}

fn run_outer(
    system: &DiffSystem,
    start: Theta,
    max_outer: usize,
    grid_start: DVector<f64>,
    clock: Instant,
) -> Result<EstimationResult> {
    if max_outer == 0 {
        return Err(Error::InvalidInput(
            "iterative estimation needs at least one outer step".into(),
        ));
    }
    let mut theta = start;
    let mut log: Vec<OuterStep> = Vec::new();
    let mut outer_converged = false;
    for _ in 0..max_outer {
        let step = match outer_step(system, &theta) {
            Ok(s) => s,
            Err(e) if is_recoverable(&e) => break,
            Err(e) => return Err(e),
        };
        theta = step.theta.clone();
        let done = step.sigma_step_norm <= step_tolerance();
        log.push(step);
        if done {
            outer_converged = true;
            break;
        }
    }

    let report = match log.last() {
        Some(last) => OptimizerReport {
            converged: outer_converged && last.inner.converged,
            iterations: log.iter().map(|s| s.inner.iterations).sum(),
            final_step_norm: last.sigma_step_norm,
            final_gradient_norm: last.inner.final_gradient_norm,
            objective: last.inner.objective,
            method_used: last.inner.method_used,
        },
        None => OptimizerReport {
            converged: false,
            iterations: 0,
            final_step_norm: f64::INFINITY,
            final_gradient_norm: f64::INFINITY,
            objective: f64::INFINITY,
            method_used: Method::QuasiNewtonFallback,
        },
    };

    let fitted = match iterative_fitted(system, &theta) {
        Ok(f) => Some(f),
        Err(e) if is_recoverable(&e) => None,
        Err(e) => return Err(e),
    };

    Ok(EstimationResult {
        theta_hat: theta,
        beta_hat: None,
        objective_value: report.objective,
        report,
        grid_start,
        se: None,
        wall_time: clock.elapsed(),
        fitted,
        outer: Some(log),
    })
}

/// One outer iteration: freeze the instruments at `theta`, concentrate the
/// price coefficient out of the demeaned system, search the spreads from
/// theta's spreads, and re-concentrate at the accepted point.
fn outer_step(system: &DiffSystem, theta: &Theta) -> Result<OuterStep> {
    let l1 = system.l1;
    let q = 1 + l1;
    let n = system.n as f64;
    let z_til = demean_columns(&system.instrument_matrix(&theta.sigma, theta.alpha)?);
    let x_til = demean_vector(&system.dp);

    let zx = z_til.transpose() * &x_til;
    let gram = zx.norm_squared();
    if gram <= f64::MIN_POSITIVE {
        return Err(Error::RankDeficient(
            "frozen instruments are orthogonal to the price changes".into(),
        ));
    }
    // With the identity weight the concentration map collapses to a
    // projection on Z'X; the annihilator sends Z'dD to the concentrated
    // moments.
    let coef = zx.transpose() / gram;
    let annihilator = DMatrix::identity(q, q) - &zx * &coef;
    let weight = DMatrix::identity(q, q);

    let moments = |t: &DVector<f64>| -> Result<DVector<f64>> {
        let sigma = DVector::from_fn(l1, |i, _| softplus(t[i]));
        let point = system.pair_point(&sigma)?;
        let dd_til = demean_vector(&point.diff);
        Ok(&annihilator * (z_til.transpose() * dd_til) / n)
    };
    let jacobian = |t: &DVector<f64>| -> Result<DMatrix<f64>> {
        let sigma = DVector::from_fn(l1, |i, _| softplus(t[i]));
        let grad_til = demean_columns(system.diff_gradient(&sigma)?.as_ref());
        let mut jac = &annihilator * (z_til.transpose() * grad_til) / n;
        for i in 0..l1 {
            jac.column_mut(i).scale_mut(softplus_derivative(t[i]));
        }
        Ok(jac)
    };

    let t_start = DVector::from_fn(l1, |i, _| softplus_inverse(theta.sigma[i].max(1e-8)));
    let gn = gauss_newton(
        |t: &DVector<f64>| moments(t),
        |t: &DVector<f64>| jacobian(t),
        &weight,
        &t_start,
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
                |t: &DVector<f64>| match moments(t) {
                    Ok(h) => Ok(0.5 * h.norm_squared()),
                    Err(e) => soft_objective(e),
                },
                &t_start,
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
    let (t_hat, inner) = solved.ok_or_else(|| {
        Error::NonConvergence("inner spread search failed at the frozen instruments".into())
    })?;

    let sigma_next = DVector::from_fn(l1, |i, _| softplus(t_hat[i]));
    let point = system.pair_point(&sigma_next)?;
    let dd_til = demean_vector(&point.diff);
    let x_mat = DMatrix::from_column_slice(system.n, 1, x_til.as_slice());
    let alpha_next = concentrate_linear(&dd_til, &x_mat, &z_til, &weight)?[0];
    let step_norm = (&sigma_next - &theta.sigma).norm();
    Ok(OuterStep {
        theta: Theta { alpha: alpha_next, sigma: sigma_next },
        sigma_step_norm: step_norm,
        inner,
    })
}

/// Moment-level pieces of the demeaned system the final outer step solved,
/// with the instruments frozen at `theta`: analytic derivatives.
fn iterative_fitted(system: &DiffSystem, theta: &Theta) -> Result<FittedMoments> {
    let q = 1 + system.l1;
    let n = system.n as f64;
    let z_til = demean_columns(&system.instrument_matrix(&theta.sigma, theta.alpha)?);
    let x_til = demean_vector(&system.dp);
    let point = system.pair_point(&theta.sigma)?;
    let dd_til = demean_vector(&point.diff);
    let xi = &dd_til - &x_til * theta.alpha;
    let mut contributions = DMatrix::zeros(system.n, q);
    for i in 0..system.n {
        for c in 0..q {
            contributions[(i, c)] = z_til[(i, c)] * xi[i];
        }
    }
    let grad_til = demean_columns(system.diff_gradient(&theta.sigma)?.as_ref());
    let mut jacobian = DMatrix::zeros(q, q);
    jacobian.columns_mut(0, system.l1).copy_from(&(z_til.transpose() * grad_til / n));
    jacobian.set_column(system.l1, &(-((z_til.transpose() * &x_til) / n)));
    // Demeaning couples every pair through the grand mean, so these moments
    // have no per-market shift-share decomposition for shock-level
    // clustering.
    Ok(FittedMoments {
        parameter_names: system.parameter_names(),
        contributions,
        cluster: system.row_pair.clone(),
        jacobian,
        weight: DMatrix::identity(q, q),
        shock_level: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{gmm_standard_errors, Clustering};
    use crate::instruments::ssiv_weights;
    use crate::mixedlogit::shares;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Two-period panel whose utility changes satisfy
    /// ddelta = alpha* dp + noise, so at zero noise the true parameters
    /// zero every moment condition exactly.
    fn paired_panel(
        sigma: &DVector<f64>,
        alpha: f64,
        draws: &ConsumerDraws,
        noise: f64,
        zero_shocks: bool,
    ) -> Vec<Market> {
        let mut rng = ChaCha12Rng::seed_from_u64(733);
        let l1 = sigma.len();
        let mut markets = Vec::new();
        for region in 0..3 {
            let j = 8;
            let x1 = DMatrix::from_fn(j, l1, |_, _| rng.gen_range(-1.0..1.0));
            let mut x = DMatrix::from_element(j, l1 + 1, 1.0);
            x.columns_mut(1, l1).copy_from(&x1);
            let p1 = DVector::from_fn(j, |r, _| 3.0 + 0.3 * r as f64 + rng.gen_range(0.0..0.3));
            let g = if zero_shocks {
                DVector::zeros(j)
            } else {
                DVector::from_fn(j, |_, _| rng.gen_range(-0.6..0.6))
            };
            let dp = DVector::from_fn(j, |i, _| 0.2 + 0.65 * g[i] + rng.gen_range(-0.05..0.05));
            let p2 = &p1 + &dp;
            let delta1 =
                DVector::from_fn(j, |i, _| 4.0 + 0.9 * x1[(i, 0)] + alpha * p1[i]);
            let delta2 = DVector::from_fn(j, |i, _| {
                delta1[i] + alpha * dp[i] + rng.gen_range(-noise..=noise)
            });
            let s1 = shares(&delta1, sigma, &x1, draws).unwrap();
            let s2 = shares(&delta2, sigma, &x1, draws).unwrap();
            let early = Market::new(
                region,
                1,
                x.clone(),
                x1.clone(),
                p1.clone(),
                s1.clone(),
                1.0 - s1.sum(),
                DVector::zeros(j),
            )
            .unwrap();
            let late =
                Market::new(region, 2, x, x1, p2, s2.clone(), 1.0 - s2.sum(), g).unwrap();
            markets.push(early);
            markets.push(late);
        }
        markets
    }

    #[test]
    fn exact_differences_are_recovered_by_both_instrument_kinds() {
        let draws = ConsumerDraws::scrambled_halton(2, 60).unwrap();
        let sigma = DVector::from_vec(vec![0.7, 1.1]);
        let markets = paired_panel(&sigma, -1.4, &draws, 0.0, false);
        let problem = GmmProblem::recentered(&markets, &draws);

        for (kind, permutations) in
            [(RecenteredIvKind::ShiftShare, 1), (RecenteredIvKind::ExactPrediction, 4)]
        {
            let fit = estimate_cu_recentered(&problem, kind, permutations, 9).unwrap();
            assert!(fit.report.converged, "{kind:?} did not converge");
            assert_relative_eq!(fit.theta_hat.sigma[0], 0.7, epsilon = 1e-5);
            assert_relative_eq!(fit.theta_hat.sigma[1], 1.1, epsilon = 1e-5);
            assert_relative_eq!(fit.theta_hat.alpha, -1.4, epsilon = 1e-5);
            assert!(fit.objective_value <= 1e-14, "objective {}", fit.objective_value);
            assert!(fit.beta_hat.is_none());
            assert!(fit.outer.is_none());
            let fitted = fit.fitted.as_ref().unwrap();
            assert_eq!(fitted.contributions.ncols(), 3);
            assert_eq!(fitted.jacobian.shape(), (3, 3));
            assert_eq!(fitted.parameter_names, vec!["sigma1", "sigma2", "alpha"]);
            assert_eq!(
                fitted.shock_level.is_some(),
                kind == RecenteredIvKind::ShiftShare
            );
        }
    }

    #[test]
    fn iterative_scheme_reaches_the_same_zero_residual_point() {
        let draws = ConsumerDraws::scrambled_halton(2, 60).unwrap();
        let sigma = DVector::from_vec(vec![0.7, 1.1]);
        let markets = paired_panel(&sigma, -1.4, &draws, 0.0, false);
        let problem = GmmProblem::recentered(&markets, &draws);

        let fit =
            estimate_iterative_recentered(&problem, RecenteredIvKind::ShiftShare, 1, 9, 100)
                .unwrap();
        assert!(fit.report.converged);
        assert_relative_eq!(fit.theta_hat.sigma[0], 0.7, epsilon = 1e-5);
        assert_relative_eq!(fit.theta_hat.sigma[1], 1.1, epsilon = 1e-5);
        assert_relative_eq!(fit.theta_hat.alpha, -1.4, epsilon = 1e-6);
        let outer = fit.outer.as_ref().unwrap();
        assert!(!outer.is_empty());
        assert!(outer.last().unwrap().sigma_step_norm <= step_tolerance());
        assert!(fit.objective_value <= 1e-14);
    }

    #[test]
    fn shock_free_panels_are_rejected_up_front() {
        let draws = ConsumerDraws::scrambled_halton(2, 40).unwrap();
        let sigma = DVector::from_vec(vec![0.5, 0.8]);
        let markets = paired_panel(&sigma, -1.2, &draws, 0.0, true);
        let problem = GmmProblem::recentered(&markets, &draws);
        for result in [
            estimate_cu_recentered(&problem, RecenteredIvKind::ShiftShare, 1, 4),
            estimate_iterative_recentered(&problem, RecenteredIvKind::ShiftShare, 1, 4, 10),
        ] {
            assert!(matches!(result.unwrap_err(), Error::RankDeficient(_)));
        }
    }

    #[test]
    fn mismatched_problem_configuration_is_invalid() {
        let draws = ConsumerDraws::scrambled_halton(2, 40).unwrap();
        let sigma = DVector::from_vec(vec![0.5, 0.8]);
        let markets = paired_panel(&sigma, -1.2, &draws, 0.0, false);
        let problem = GmmProblem::characteristic(&markets, &draws);
        assert!(matches!(
            estimate_cu_recentered(&problem, RecenteredIvKind::ShiftShare, 1, 4).unwrap_err(),
            Error::InvalidInput(_)
        ));
    }

    #[test]
    fn pass_through_scale_is_immaterial_for_shift_share() {
        let draws = ConsumerDraws::scrambled_halton(2, 50).unwrap();
        let sigma = DVector::from_vec(vec![0.7, 1.1]);
        let markets = paired_panel(&sigma, -1.4, &draws, 0.04, false);
        let problem = GmmProblem::recentered(&markets, &draws);

        let base = PassThrough { pi_check: 0.65, intercept: 0.0, fitted_on: "fixed".into() };
        let scaled =
            PassThrough { pi_check: 6.5, intercept: 0.0, fitted_on: "rescaled".into() };
        let fit1 = estimate_cu_recentered_with(
            &problem,
            RecenteredIvKind::ShiftShare,
            1,
            9,
            &base,
        )
        .unwrap();
        let fit2 = estimate_cu_recentered_with(
            &problem,
            RecenteredIvKind::ShiftShare,
            1,
            9,
            &scaled,
        )
        .unwrap();
        assert!(fit1.report.converged && fit2.report.converged);
        for i in 0..2 {
            assert!(
                (fit1.theta_hat.sigma[i] - fit2.theta_hat.sigma[i]).abs() <= 1e-6,
                "sigma{i}: {} vs {}",
                fit1.theta_hat.sigma[i],
                fit2.theta_hat.sigma[i]
            );
        }
        assert!((fit1.theta_hat.alpha - fit2.theta_hat.alpha).abs() <= 1e-6);
    }

    #[test]
    fn one_frozen_outer_step_matches_a_direct_two_step_solve() {
        let draws = ConsumerDraws::scrambled_halton(2, 50).unwrap();
        let sigma_true = DVector::from_vec(vec![0.7, 1.1]);
        let markets = paired_panel(&sigma_true, -1.4, &draws, 0.04, false);
        let problem = GmmProblem::recentered(&markets, &draws);
        let truth = Theta::new(-1.4, sigma_true.clone()).unwrap();
        let pass = PassThrough { pi_check: 0.65, intercept: 0.0, fitted_on: "fixed".into() };

        let fit = estimate_iterative_recentered_from(
            &problem,
            RecenteredIvKind::ShiftShare,
            1,
            9,
            1,
            &truth,
            &pass,
        )
        .unwrap();
        assert_eq!(fit.outer.as_ref().unwrap().len(), 1);

        // Independent two-step solve: assemble the frozen instruments from
        // the public constructors, demean, and minimize the concentrated
        // objective by plain quasi-Newton from a coarse scan.
        let pairs = problem.adjacent_pairs().unwrap();
        let n: usize = pairs.iter().map(|(_, late)| late.products()).sum();
        let mut z = DMatrix::zeros(n, 3);
        let mut dp = DVector::zeros(n);
        let mut row = 0usize;
        for (early, late) in &pairs {
            let w = ssiv_weights(early, &truth, pass.pi_check, &draws).unwrap();
            let block = build_ssiv(late, &w, &DVector::zeros(late.products())).unwrap();
            z.view_mut((row, 0), (late.products(), 3)).copy_from(&block);
            for j in 0..late.products() {
                dp[row + j] = late.p[j] - early.p[j];
            }
            row += late.products();
        }
        let z_til = demean_columns(&z);
        let x_til = demean_vector(&dp);
        let zx = z_til.transpose() * &x_til;
        let diff_at = |sigma: &DVector<f64>| -> DVector<f64> {
            let config = FixedPointConfig::default();
            let mut diff = DVector::zeros(n);
            let mut row = 0usize;
            for (early, late) in &pairs {
                let (de, _) =
                    invert_shares(&early.s, early.s0, sigma, &early.x1, &draws, &config)
                        .unwrap();
                let (dl, _) =
                    invert_shares(&late.s, late.s0, sigma, &late.x1, &draws, &config).unwrap();
                for j in 0..dl.len() {
                    diff[row] = dl[j] - de[j];
                    row += 1;
                }
            }
            diff
        };
        let alpha_of = |dd_til: &DVector<f64>| -> f64 {
            zx.dot(&(z_til.transpose() * dd_til)) / zx.norm_squared()
        };
        let objective_at = |sigma: &DVector<f64>| -> f64 {
            let dd_til = demean_vector(&diff_at(sigma));
            let alpha = alpha_of(&dd_til);
            let h = (z_til.transpose() * (&dd_til - &x_til * alpha)) / n as f64;
            0.5 * h.norm_squared()
        };
        let mut best = (f64::INFINITY, DVector::zeros(2));
        for a in 0..7 {
            for b in 0..7 {
                let sigma = DVector::from_vec(vec![0.5 * a as f64, 0.5 * b as f64]);
                let q = objective_at(&sigma);
                if q < best.0 {
                    best = (q, sigma);
                }
            }
        }
        let t_best = DVector::from_fn(2, |i, _| softplus_inverse(best.1[i].max(1e-8)));
        let (t_hat, report) = quasi_newton(
            |t: &DVector<f64>| {
                Ok(objective_at(&DVector::from_fn(2, |i, _| softplus(t[i]))))
            },
            &t_best,
            gradient_fallback_threshold(),
            MAX_QN_ITERATIONS,
        )
        .unwrap();
        assert!(report.converged);
        let sigma_direct = DVector::from_fn(2, |i, _| softplus(t_hat[i]));
        let alpha_direct = alpha_of(&demean_vector(&diff_at(&sigma_direct)));

        for i in 0..2 {
            assert!(
                (fit.theta_hat.sigma[i] - sigma_direct[i]).abs() <= 5e-4,
                "sigma{i}: {} vs {}",
                fit.theta_hat.sigma[i],
                sigma_direct[i]
            );
        }
        assert!(
            (fit.theta_hat.alpha - alpha_direct).abs() <= 5e-4,
            "alpha: {} vs {alpha_direct}",
            fit.theta_hat.alpha
        );
    }

    #[test]
    fn rerunning_from_the_fixed_point_stops_immediately() {
        let draws = ConsumerDraws::scrambled_halton(2, 50).unwrap();
        let sigma = DVector::from_vec(vec![0.7, 1.1]);
        let markets = paired_panel(&sigma, -1.4, &draws, 0.04, false);
        let problem = GmmProblem::recentered(&markets, &draws);

        let fit =
            estimate_iterative_recentered(&problem, RecenteredIvKind::ShiftShare, 1, 9, 100)
                .unwrap();
        assert!(fit.report.converged);

        let pass = estimate_pass_through(&problem.adjacent_pairs().unwrap()).unwrap();
        let again = estimate_iterative_recentered_from(
            &problem,
            RecenteredIvKind::ShiftShare,
            1,
            9,
            1,
            &fit.theta_hat,
            &pass,
        )
        .unwrap();
        assert!(again.report.converged);
        let steps = again.outer.as_ref().unwrap();
        assert_eq!(steps.len(), 1);
        assert!(steps[0].sigma_step_norm <= step_tolerance());
        for i in 0..2 {
            assert!((again.theta_hat.sigma[i] - fit.theta_hat.sigma[i]).abs() <= 1e-7);
        }
    }

    #[test]
    fn shock_level_clustering_works_only_where_weights_exist() {
        let draws = ConsumerDraws::scrambled_halton(2, 50).unwrap();
        let sigma = DVector::from_vec(vec![0.7, 1.1]);
        let markets = paired_panel(&sigma, -1.4, &draws, 0.04, false);
        let problem = GmmProblem::recentered(&markets, &draws);

        let ssiv =
            estimate_cu_recentered(&problem, RecenteredIvKind::ShiftShare, 1, 9).unwrap();
        assert!(ssiv.report.converged);
        let by_market = gmm_standard_errors(&ssiv, Clustering::ByMarket).unwrap();
        let by_shock = gmm_standard_errors(&ssiv, Clustering::ByShock).unwrap();
        for i in 0..3 {
            assert!(by_market.values[i].is_finite() && by_market.values[i] > 0.0);
            assert!(by_shock.values[i].is_finite() && by_shock.values[i] > 0.0);
        }

        let fiv =
            estimate_cu_recentered(&problem, RecenteredIvKind::ExactPrediction, 4, 9).unwrap();
        assert!(matches!(
            gmm_standard_errors(&fiv, Clustering::ByShock).unwrap_err(),
            Error::MissingData(_)
        ));
    }
}
