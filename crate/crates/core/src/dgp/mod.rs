//! Synthetic demand panels: regions observed over two (or more) periods with
//! persistent characteristics, AR(1) taste and cost shifters, iid observed
//! cost shocks entering only from the second period on, and prices set by a
//! simultaneous Bertrand-Nash game.
//!
//! Randomness is drawn from named substreams of one master seed, so scenario
//! sweeps (shock scale, common products, bliss points) reuse identical
//! non-swept draws and differ only where the scenario says they should.

mod pricing;

pub use pricing::{foc_residual, solve_prices, FOC_TOLERANCE};

use crate::error::{Error, Result};
use crate::mixedlogit::{shares_unchecked, ConsumerDraws, Market, Theta, MIN_SHARE};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;

/// Strength of the taste penalty for distance from a region's bliss point.
pub const BLISS_PENALTY: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Baseline,
    /// Rescale the observed cost shocks, keeping every other draw fixed.
    ShockSweep { sd: f64 },
    /// The first `count` products share characteristics across all regions.
    CommonProducts { count: usize },
    /// Characteristic 1 is recentered on a region taste optimum, making
    /// product positioning endogenous.
    BlissPoint,
}

#[derive(Debug, Clone)]
pub struct DgpConfig {
    pub n_regions: usize,
    pub n_products: usize,
    pub n_periods: usize,
    /// Number of characteristics carrying random coefficients.
    pub l1: usize,
    pub sigma_true: DVector<f64>,
    pub alpha_true: f64,
    /// Mean-utility coefficients on (intercept, characteristics).
    pub beta: DVector<f64>,
    /// Marginal-cost coefficients on (intercept, characteristics).
    pub gamma: DVector<f64>,
    pub ar_coef: f64,
    pub shock_sd: f64,
    /// Consumer draws used to simulate shares, shared across markets.
    pub dgp_draws: usize,
    pub seed: u64,
    pub scenario: Scenario,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_regions: 100,
            n_products: 15,
            n_periods: 2,
            l1: 2,
            sigma_true: DVector::from_vec(vec![4.0, 4.0]),
            alpha_true: -0.2 - 4.0 * 0.5f64.exp(),
            beta: DVector::from_vec(vec![35.0, 2.0, 2.0]),
            gamma: DVector::from_vec(vec![5.0, 1.0, 1.0]),
            ar_coef: 0.9,
            shock_sd: 0.2,
            dgp_draws: 1000,
            seed: 0,
            scenario: Scenario::Baseline,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions == 0 || self.n_products == 0 || self.n_periods == 0 {
            return Err(Error::InvalidInput("regions, products and periods must be positive".into()));
        }
        if self.l1 == 0 || self.sigma_true.len() != self.l1 {
            return Err(Error::Dimension(format!(
                "{} taste spreads for {} random-coefficient characteristics",
                self.sigma_true.len(),
                self.l1
            )));
        }
        if self.beta.len() != self.l1 + 1 || self.gamma.len() != self.l1 + 1 {
            return Err(Error::Dimension(
                "beta and gamma must cover the intercept plus each characteristic".into(),
            ));
        }
        if !(self.alpha_true < 0.0) {
            return Err(Error::InvalidInput("price coefficient must be negative".into()));
        }
        if !(self.shock_sd >= 0.0) {
            return Err(Error::InvalidInput("shock sd must be nonnegative".into()));
        }
        if !(self.ar_coef > -1.0 && self.ar_coef < 1.0) {
            return Err(Error::InvalidInput("AR coefficient must lie in (-1, 1)".into()));
        }
        if self.dgp_draws == 0 {
            return Err(Error::InvalidInput("need at least one consumer draw".into()));
        }
        match self.scenario {
            Scenario::ShockSweep { sd } if !(sd >= 0.0) => {
                Err(Error::InvalidInput("swept shock sd must be nonnegative".into()))
            }
            Scenario::CommonProducts { count } if count > self.n_products => {
                Err(Error::InvalidInput("more common products than products".into()))
            }
            _ => Ok(()),
        }
    }

    /// Shock scale after applying any sweep override.
    pub fn effective_shock_sd(&self) -> f64 {
        match self.scenario {
            Scenario::ShockSweep { sd } => sd,
            _ => self.shock_sd,
        }
    }

    pub fn theta_true(&self) -> Theta {
        Theta::new(self.alpha_true, self.sigma_true.clone())
            .expect("validated config carries a valid parameter point")
    }
}

/// Named substreams of the master seed. Every consumer of randomness gets
/// its own stream so adding or resizing one draw block never shifts another.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Characteristics,
    TasteShifters,
    CostShifters,
    CostShocks,
    ConsumerDraws,
    BlissPoints,
    Permutations,
}

pub fn stream_rng(seed: u64, stream: SeedStream) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(match stream {
        SeedStream::Characteristics => 1,
        SeedStream::TasteShifters => 2,
        SeedStream::CostShifters => 3,
        SeedStream::CostShocks => 4,
        SeedStream::ConsumerDraws => 5,
        SeedStream::BlissPoints => 6,
        SeedStream::Permutations => 7,
    });
    rng
}

fn standard_normals<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    let dist = rand_distr::StandardNormal;
    DVector::from_fn(n, |_, _| dist.sample(rng))
}

/// Shift a standard-normal characteristic column so it centers on the bliss
/// point, and the taste penalty that induces: products keep their distance
/// to the optimum, and utility loses `BLISS_PENALTY` times that distance
/// squared.
pub fn apply_bliss_point(raw: &DVector<f64>, region_bliss: f64) -> (DVector<f64>, DVector<f64>) {
    let shifted = raw.add_scalar(region_bliss);
    let penalty = raw.map(|z| BLISS_PENALTY * z * z);
    (shifted, penalty)
}

/// Everything random about a panel except prices and shares: characteristics,
/// taste and cost shifters, observed shocks, and the shared consumer draws.
/// Splitting this from equilibrium assembly lets shocks be redrawn on a fixed
/// panel, which is how instrument validity is audited.
#[derive(Debug, Clone)]
pub struct PanelInputs {
    pub regions: Vec<RegionInputs>,
    pub draws: ConsumerDraws,
    /// Region taste optima, present only under the bliss-point scenario.
    pub bliss: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct RegionInputs {
    /// (intercept, characteristics), J x (1 + L1), time invariant.
    pub x: DMatrix<f64>,
    /// Random-coefficient characteristics, J x L1.
    pub x1: DMatrix<f64>,
    /// Taste shifters per period (bliss penalty already applied).
    pub xi: Vec<DVector<f64>>,
    /// Cost shifters per period.
    pub omega: Vec<DVector<f64>>,
    /// Observed cost shocks per period; identically zero in period 1.
    pub g: Vec<DVector<f64>>,
}

/// Draw the non-equilibrium part of a panel from the config's substreams.
pub fn draw_panel_inputs(config: &DgpConfig) -> Result<PanelInputs> {
    config.validate()?;
    let (n_r, j, l1, t_max) = (config.n_regions, config.n_products, config.l1, config.n_periods);
    let ar = config.ar_coef;
    let innovation_scale = (1.0 - ar * ar).sqrt();

    let mut x_rng = stream_rng(config.seed, SeedStream::Characteristics);
    let mut raw_x: Vec<DMatrix<f64>> = (0..n_r)
        .map(|_| DMatrix::from_fn(j, l1, |_, _| rand_distr::StandardNormal.sample(&mut x_rng)))
        .collect();
    if let Scenario::CommonProducts { count } = config.scenario {
        for r in 1..n_r {
            for jj in 0..count {
                for l in 0..l1 {
                    raw_x[r][(jj, l)] = raw_x[0][(jj, l)];
                }
            }
        }
    }

    let bliss: Option<DVector<f64>> = match config.scenario {
        Scenario::BlissPoint => {
            let mut b_rng = stream_rng(config.seed, SeedStream::BlissPoints);
            Some(standard_normals(&mut b_rng, n_r))
        }
        _ => None,
    };

    let mut xi_rng = stream_rng(config.seed, SeedStream::TasteShifters);
    let mut omega_rng = stream_rng(config.seed, SeedStream::CostShifters);
    let mut g_rng = stream_rng(config.seed, SeedStream::CostShocks);
    let shock_sd = config.effective_shock_sd();

    let mut regions = Vec::with_capacity(n_r);
    for r in 0..n_r {
        let mut x1 = raw_x[r].clone();
        let mut penalty = DVector::zeros(j);
        if let Some(b) = &bliss {
            let (shifted, pen) = apply_bliss_point(&raw_x[r].column(0).into_owned(), b[r]);
            x1.set_column(0, &shifted);
            penalty = pen;
        }
        let mut x = DMatrix::from_element(j, l1 + 1, 1.0);
        for l in 0..l1 {
            x.set_column(l + 1, &x1.column(l));
        }

        let mut xi = Vec::with_capacity(t_max);
        let mut omega = Vec::with_capacity(t_max);
        let mut g = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let xi_t = if t == 0 {
                standard_normals(&mut xi_rng, j)
            } else {
                &xi[t - 1] * ar + standard_normals(&mut xi_rng, j) * innovation_scale
            };
            xi.push(xi_t);
            let omega_t = if t == 0 {
                standard_normals(&mut omega_rng, j)
            } else {
                &omega[t - 1] * ar + standard_normals(&mut omega_rng, j) * innovation_scale
            };
            omega.push(omega_t);
            // Shock draws are consumed even at scale zero so sweeps over the
            // scale reuse the same underlying randomness.
            let z = standard_normals(&mut g_rng, j);
            g.push(if t == 0 { DVector::zeros(j) } else { z * shock_sd });
        }
        // The AR recursion above runs on the penalty-free shifters; apply the
        // time-invariant bliss penalty to every period afterwards.
        for t in 0..t_max {
            xi[t] -= &penalty;
        }
        regions.push(RegionInputs { x, x1, xi, omega, g });
    }

    let mut draw_rng = stream_rng(config.seed, SeedStream::ConsumerDraws);
    let nu = DMatrix::from_fn(config.dgp_draws, l1, |_, _| {
        rand_distr::StandardNormal.sample(&mut draw_rng)
    });
    let draws = ConsumerDraws::from_matrix(nu);
    Ok(PanelInputs { regions, draws, bliss })
}

/// Redraw only the observed cost shocks on an existing panel, leaving
/// characteristics, taste and cost shifters untouched.
pub fn redraw_shocks<R: Rng>(inputs: &mut PanelInputs, sd: f64, rng: &mut R) {
    for region in &mut inputs.regions {
        for (t, g_t) in region.g.iter_mut().enumerate() {
            if t > 0 {
                *g_t = standard_normals(rng, g_t.len()) * sd;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DroppedMarket {
    pub region: usize,
    pub period: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub markets: Vec<Market>,
    pub dropped: Vec<DroppedMarket>,
    pub truth: DgpConfig,
}

impl SimulatedPanel {
    /// Markets from `period`, in region order.
    pub fn period(&self, period: usize) -> Vec<&Market> {
        self.markets.iter().filter(|m| m.period == period).collect()
    }

    /// Regions observed in both requested periods, as (early, late) pairs.
    pub fn paired(&self, first: usize, second: usize) -> Vec<(&Market, &Market)> {
        let mut out = Vec::new();
        for early in self.markets.iter().filter(|m| m.period == first) {
            if let Some(late) =
                self.markets.iter().find(|m| m.period == second && m.region == early.region)
            {
                out.push((early, late));
            }
        }
        out
    }
}

/// Solve every market's equilibrium prices and package the panel. Markets
/// whose price solvers both fail are recorded and skipped, not fatal.
pub fn assemble_panel(inputs: &PanelInputs, config: &DgpConfig) -> Result<SimulatedPanel> {
    config.validate()?;
    let theta = config.theta_true();
    let mut markets = Vec::new();
    let mut dropped = Vec::new();
    for (r, region) in inputs.regions.iter().enumerate() {
        for t in 0..config.n_periods {
            let period = t + 1;
            let mut costs = region.x.clone() * &config.gamma;
            costs += &region.omega[t];
            costs += &region.g[t];
            let mut dexog = region.x.clone() * &config.beta;
            dexog += &region.xi[t];
            let p = match solve_prices(&costs, &dexog, &theta, &region.x1, &inputs.draws) {
                Ok(p) => p,
                Err(e) => {
                    dropped.push(DroppedMarket { region: r, period, reason: e.to_string() });
                    continue;
                }
            };
            let delta = &dexog + &p * theta.alpha;
            let s = shares_unchecked(&delta, &theta.sigma, &region.x1, &inputs.draws);
            let s0 = 1.0 - s.sum();
            if s.iter().any(|&v| v <= MIN_SHARE) || s0 <= MIN_SHARE {
                dropped.push(DroppedMarket {
                    region: r,
                    period,
                    reason: "equilibrium share vanished".into(),
                });
                continue;
            }
            match Market::new(
                r,
                period,
                region.x.clone(),
                region.x1.clone(),
                p,
                s,
                s0,
                region.g[t].clone(),
            ) {
                Ok(m) => markets.push(m),
                Err(e) => {
                    dropped.push(DroppedMarket { region: r, period, reason: e.to_string() })
                }
            }
        }
    }
    Ok(SimulatedPanel { markets, dropped, truth: config.clone() })
}

/// Draw a panel and solve its equilibria in one call.
pub fn simulate_panel(config: &DgpConfig) -> Result<SimulatedPanel> {
    let inputs = draw_panel_inputs(config)?;
    assemble_panel(&inputs, config)
}
