//! Mixed-logit market shares, share inversion, and the analytic derivative
//! blocks needed for instrument construction and estimation.

mod inversion;
mod shares;

pub use inversion::{
    invert_shares, invert_shares_from, inversion_derivatives, inversion_derivatives_at_delta,
    inversion_sigma_gradient, local_to_logit_inversion, InversionDerivatives,
};
pub use shares::{
    share_cross_sigma_delta, share_dsigma, share_hessian_delta, share_hessian_delta_contract,
    share_jacobian_delta, shares, shares_second_order, shares_unchecked,
};
pub(crate) use shares::shares_and_jacobian_unchecked;

use crate::error::{Error, Result};
use crate::solvers::{halton_draws, normal_inverse_cdf};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::Distribution;

/// Shares at or below the smallest normal double are indistinguishable from
/// zero in the log domain and are rejected; anything strictly positive is a
/// valid observation (equilibria with near-dominated products legitimately
/// produce shares many orders of magnitude below one).
pub const MIN_SHARE: f64 = f64::MIN_POSITIVE;

/// One market: products, characteristics, prices, shares and cost shocks.
/// `x` column 0 is the intercept; `x1` holds the columns carrying random
/// coefficients. Lagged-period links are kept by the owning panel.
#[derive(Debug, Clone)]
pub struct Market {
    pub region: usize,
    pub period: usize,
    /// J x L, column 0 all ones.
    pub x: DMatrix<f64>,
    /// J x L1 random-coefficient characteristics.
    pub x1: DMatrix<f64>,
    pub p: DVector<f64>,
    pub s: DVector<f64>,
    pub s0: f64,
    pub g: DVector<f64>,
}

impl Market {
    pub fn new(
        region: usize,
        period: usize,
        x: DMatrix<f64>,
        x1: DMatrix<f64>,
        p: DVector<f64>,
        s: DVector<f64>,
        s0: f64,
        g: DVector<f64>,
    ) -> Result<Self> {
        let j = x.nrows();
        if j == 0 {
            return Err(Error::InvalidInput("market needs at least one product".into()));
        }
        if x1.nrows() != j || p.len() != j || s.len() != j || g.len() != j {
            return Err(Error::Dimension(format!(
                "market arrays disagree on product count {j}"
            )));
        }
        if x1.ncols() > x.ncols() {
            return Err(Error::Dimension(
                "more random-coefficient columns than characteristics".into(),
            ));
        }
        if s.iter().any(|&v| !(v > MIN_SHARE) || !v.is_finite()) || !(s0 > MIN_SHARE) {
            return Err(Error::InvalidInput(
                "shares at or near zero are rejected, not clipped".into(),
            ));
        }
        let total = s.sum() + s0;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "shares plus outside share sum to {total}, expected 1"
            )));
        }
        Ok(Market { region, period, x, x1, p, s, s0, g })
    }

    pub fn products(&self) -> usize {
        self.s.len()
    }
}

/// Demand parameters: price coefficient and random-coefficient spreads.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub alpha: f64,
    pub sigma: DVector<f64>,
}

impl Theta {
    pub fn new(alpha: f64, sigma: DVector<f64>) -> Result<Self> {
        if !(alpha < 0.0) {
            return Err(Error::InvalidInput(format!("price coefficient must be negative, got {alpha}")));
        }
        if sigma.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidInput("sigma entries must be nonnegative".into()));
        }
        Ok(Theta { alpha, sigma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawSource {
    ScrambledHalton,
    PseudoRandom,
    /// Caller-supplied matrix (tests and oracles).
    Custom,
}

/// Consumer taste draws: R x L1 standard-normal matrix shared read-only by
/// every market in a run.
#[derive(Debug, Clone)]
pub struct ConsumerDraws {
    pub nu: DMatrix<f64>,
    pub source: DrawSource,
    pub seed: u64,
}

impl ConsumerDraws {
    /// Scrambled-Halton normal draws: reverse-radix scrambling, first 1000
    /// points skipped, mapped through the inverse normal CDF. Deterministic.
    pub fn scrambled_halton(l1: usize, count: usize) -> Result<Self> {
        let points = halton_draws(l1, count, 1000, true)?;
        let mut nu = DMatrix::zeros(count, l1);
        for i in 0..count {
            for l in 0..l1 {
                nu[(i, l)] = normal_inverse_cdf(points[(i, l)])?;
            }
        }
        Ok(ConsumerDraws { nu, source: DrawSource::ScrambledHalton, seed: 0 })
    }

    /// Seeded pseudo-random normal draws (the data-generating simulator).
    pub fn pseudo_random(l1: usize, count: usize, seed: u64) -> Result<Self> {
        if l1 == 0 || count == 0 {
            return Err(Error::InvalidInput("draws need l1 >= 1 and count >= 1".into()));
        }
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let mut nu = DMatrix::zeros(count, l1);
        for l in 0..l1 {
            for i in 0..count {
                nu[(i, l)] = normal.sample(&mut rng);
            }
        }
        Ok(ConsumerDraws { nu, source: DrawSource::PseudoRandom, seed })
    }

    pub fn from_matrix(nu: DMatrix<f64>) -> Self {
        ConsumerDraws { nu, source: DrawSource::Custom, seed: 0 }
    }

    pub fn count(&self) -> usize {
        self.nu.nrows()
    }

    pub fn dims(&self) -> usize {
        self.nu.ncols()
    }
}

pub(crate) fn validate_share_inputs(
    delta: &DVector<f64>,
    sigma: &DVector<f64>,
    x1: &DMatrix<f64>,
    draws: &ConsumerDraws,
) -> Result<()> {
    let j = delta.len();
    if x1.nrows() != j {
        return Err(Error::Dimension(format!(
            "x1 has {} rows for {j} mean utilities",
            x1.nrows()
        )));
    }
    if sigma.len() != x1.ncols() || draws.dims() != x1.ncols() {
        return Err(Error::Dimension(format!(
            "sigma ({}), x1 ({} cols) and draws ({} dims) must agree",
            sigma.len(),
            x1.ncols(),
            draws.dims()
        )));
    }
    if draws.count() == 0 {
        return Err(Error::InvalidInput("no consumer draws".into()));
    }
    Ok(())
}
