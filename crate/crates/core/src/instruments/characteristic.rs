//! Characteristic-based instruments: rival sums and differentiation
//! measures built from the exogenous product characteristics alone.

use crate::error::{Error, Result};
use crate::mixedlogit::Market;
use nalgebra::{DMatrix, DVector};

/// Rival characteristic sums: entry (j, l) is the sum of characteristic l
/// over every product but j. A single-product market gets zeros.
pub fn blp_sum_iv(market: &Market) -> DMatrix<f64> {
    let x1 = &market.x1;
    let mut z = DMatrix::zeros(x1.nrows(), x1.ncols());
    for l in 0..x1.ncols() {
        let total = x1.column(l).sum();
        for j in 0..x1.nrows() {
            z[(j, l)] = total - x1[(j, l)];
        }
    }
    z
}

/// Differentiation instrument flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GhVariant {
    /// Sum of squared characteristic gaps to rivals.
    Quadratic,
    /// Count of rivals strictly inside the proximity threshold.
    Local,
}

/// Differentiation instruments: entry (j, l) aggregates how product j's
/// characteristic l relates to its rivals', either by summed squared gaps or
/// by counting rivals closer than `kappa[l]`. A rival exactly at the
/// threshold does not count as local.
pub fn gh_differentiation_iv(
    market: &Market,
    variant: GhVariant,
    kappa: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let x1 = &market.x1;
    let (j_n, l1) = (x1.nrows(), x1.ncols());
    if kappa.len() != l1 {
        return Err(Error::Dimension(format!(
            "{} proximity thresholds for {l1} characteristics",
            kappa.len()
        )));
    }
    if variant == GhVariant::Local && kappa.iter().any(|&k| !(k > 0.0)) {
        return Err(Error::InvalidInput("proximity thresholds must be positive".into()));
    }
    let mut z = DMatrix::zeros(j_n, l1);
    for l in 0..l1 {
        match variant {
            GhVariant::Quadratic => {
                // sum_{k != j} (x_j - x_k)^2 = J x_j^2 - 2 x_j sum_k x_k + sum_k x_k^2,
                // the own term contributing zero.
                let col = x1.column(l);
                let total = col.sum();
                let total_sq = col.norm_squared();
                for j in 0..j_n {
                    let own = x1[(j, l)];
                    z[(j, l)] = j_n as f64 * own * own - 2.0 * own * total + total_sq;
                }
            }
            GhVariant::Local => {
                for j in 0..j_n {
                    let own = x1[(j, l)];
                    let mut count = 0usize;
                    for k in 0..j_n {
                        if k != j && (own - x1[(k, l)]).abs() < kappa[l] {
                            count += 1;
                        }
                    }
                    z[(j, l)] = count as f64;
                }
            }
        }
    }
    Ok(z)
}

/// Pooled dispersion of each random-coefficient characteristic over every
/// product and market in the sample: the default proximity threshold for the
/// local differentiation instrument.
pub fn pooled_characteristic_sd(markets: &[&Market]) -> Result<DVector<f64>> {
    let first = markets
        .first()
        .ok_or_else(|| Error::InvalidInput("pooled dispersion needs at least one market".into()))?;
    let l1 = first.x1.ncols();
    let mut n = 0usize;
    let mut sums = vec![0.0f64; l1];
    for m in markets {
        if m.x1.ncols() != l1 {
            return Err(Error::Dimension(
                "markets disagree on characteristic count".into(),
            ));
        }
        n += m.x1.nrows();
        for l in 0..l1 {
            sums[l] += m.x1.column(l).sum();
        }
    }
    let nf = n as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    let mut out = DVector::zeros(l1);
    for l in 0..l1 {
        let mut acc = 0.0;
        for m in markets {
            for j in 0..m.x1.nrows() {
                let dev = m.x1[(j, l)] - means[l];
                acc += dev * dev;
            }
        }
        out[l] = (acc / nf).sqrt();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_distr::Distribution;

    fn market_with(x1: DMatrix<f64>) -> Market {
        let j = x1.nrows();
        let mut x = DMatrix::from_element(j, x1.ncols() + 1, 1.0);
        for l in 0..x1.ncols() {
            x.set_column(l + 1, &x1.column(l));
        }
        let s = DVector::from_element(j, 0.6 / j as f64);
        let p = DVector::from_element(j, 5.0);
        Market::new(0, 1, x, x1, p, s, 0.4, DVector::zeros(j)).unwrap()
    }

    #[test]
    fn two_products_see_each_others_characteristic() {
        let market = market_with(DMatrix::from_row_slice(2, 1, &[1.7, -0.4]));
        let z = blp_sum_iv(&market);
        assert_relative_eq!(z[(0, 0)], -0.4, epsilon = 1e-12);
        assert_relative_eq!(z[(1, 0)], 1.7, epsilon = 1e-12);
    }

    #[test]
    fn identical_products_collapse_to_counts() {
        let c = 0.8;
        let j = 5;
        let market = market_with(DMatrix::from_element(j, 2, c));
        let z = blp_sum_iv(&market);
        let kappa = DVector::from_element(2, 1.0);
        let quad = gh_differentiation_iv(&market, GhVariant::Quadratic, &kappa).unwrap();
        let local = gh_differentiation_iv(&market, GhVariant::Local, &kappa).unwrap();
        for jj in 0..j {
            for l in 0..2 {
                assert_relative_eq!(z[(jj, l)], (j - 1) as f64 * c, epsilon = 1e-12);
                assert!(quad[(jj, l)].abs() < 1e-12);
                assert_eq!(local[(jj, l)], (j - 1) as f64);
            }
        }
    }

    #[test]
    fn a_single_product_market_gets_zeros() {
        let market = market_with(DMatrix::from_row_slice(1, 2, &[1.0, -2.0]));
        let z = blp_sum_iv(&market);
        let kappa = DVector::from_element(2, 0.5);
        let quad = gh_differentiation_iv(&market, GhVariant::Quadratic, &kappa).unwrap();
        let local = gh_differentiation_iv(&market, GhVariant::Local, &kappa).unwrap();
        for l in 0..2 {
            assert_eq!(z[(0, l)], 0.0);
            assert!(quad[(0, l)].abs() < 1e-12);
            assert_eq!(local[(0, l)], 0.0);
        }
    }

    #[test]
    fn a_rival_exactly_at_the_threshold_is_not_local() {
        let kappa = DVector::from_vec(vec![0.25]);
        let market = market_with(DMatrix::from_row_slice(2, 1, &[0.5, 0.75]));
        let local = gh_differentiation_iv(&market, GhVariant::Local, &kappa).unwrap();
        assert_eq!(local[(0, 0)], 0.0);
        assert_eq!(local[(1, 0)], 0.0);
        let nudged = market_with(DMatrix::from_row_slice(2, 1, &[0.5, 0.7499]));
        let local = gh_differentiation_iv(&nudged, GhVariant::Local, &kappa).unwrap();
        assert_eq!(local[(0, 0)], 1.0);
        assert_eq!(local[(1, 0)], 1.0);
    }

    #[test]
    fn random_market_matches_pairwise_oracles() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(71);
        let normal = rand_distr::StandardNormal;
        let (j, l1) = (9, 3);
        let x1 = DMatrix::from_fn(j, l1, |_, _| {
            let v: f64 = normal.sample(&mut rng);
            v
        });
        let market = market_with(x1.clone());
        let kappa = DVector::from_fn(l1, |l, _| 0.4 + 0.3 * l as f64);

        let z = blp_sum_iv(&market);
        let quad = gh_differentiation_iv(&market, GhVariant::Quadratic, &kappa).unwrap();
        let local = gh_differentiation_iv(&market, GhVariant::Local, &kappa).unwrap();

        for l in 0..l1 {
            for a in 0..j {
                let mut sum = 0.0;
                let mut sq = 0.0;
                let mut count = 0.0;
                for b in 0..j {
                    if a == b {
                        continue;
                    }
                    let gap = x1[(a, l)] - x1[(b, l)];
                    sum += x1[(b, l)];
                    sq += gap * gap;
                    if gap.abs() < kappa[l] {
                        count += 1.0;
                    }
                }
                assert_relative_eq!(z[(a, l)], sum, epsilon = 1e-12);
                assert_relative_eq!(quad[(a, l)], sq, max_relative = 1e-12);
                assert_eq!(local[(a, l)], count);
            }
        }
    }

    #[test]
    fn pooled_dispersion_matches_a_hand_example() {
        let m1 = market_with(DMatrix::from_row_slice(2, 1, &[1.0, 3.0]));
        let m2 = market_with(DMatrix::from_row_slice(2, 1, &[5.0, 7.0]));
        let kappa = pooled_characteristic_sd(&[&m1, &m2]).unwrap();
        // values {1,3,5,7}: mean 4, mean squared deviation (9+1+1+9)/4 = 5
        assert_relative_eq!(kappa[0], 5.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn threshold_preconditions_are_enforced() {
        let market = market_with(DMatrix::from_row_slice(2, 1, &[0.1, 0.9]));
        let bad_len = DVector::from_vec(vec![0.5, 0.5]);
        assert!(gh_differentiation_iv(&market, GhVariant::Quadratic, &bad_len).is_err());
        let zero = DVector::from_vec(vec![0.0]);
        assert!(gh_differentiation_iv(&market, GhVariant::Local, &zero).is_err());
        // The quadratic variant never reads the thresholds, so zero is fine.
        assert!(gh_differentiation_iv(&market, GhVariant::Quadratic, &zero).is_ok());
        assert!(pooled_characteristic_sd(&[]).is_err());
    }
}
