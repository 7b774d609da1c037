//! Halton sequences with reverse-radix digit scrambling, and the inverse
//! standard normal CDF used to map them to consumer taste draws.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Prime bases for the supported dimensions.
pub const HALTON_PRIME_BASES: [u64; 16] =
    [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Reverse-radix digit permutation for `base`: bit-reverse 0..2^m (m = bits
/// of base-1) and keep values below `base`. Fixes 0, so scrambled entries of
/// positive indices stay strictly positive.
fn reverse_radix_permutation(base: u64) -> Vec<u64> {
    let m = 64 - (base - 1).leading_zeros();
    let mut perm = Vec::with_capacity(base as usize);
    for k in 0..(1u64 << m) {
        let r = k.reverse_bits() >> (64 - m);
        if r < base {
            perm.push(r);
        }
    }
    perm
}

fn radical_inverse(mut n: u64, base: u64, perm: Option<&[u64]>) -> f64 {
    let inv_base = 1.0 / base as f64;
    let mut value = 0.0;
    let mut scale = inv_base;
    while n > 0 {
        let d = n % base;
        let digit = match perm {
            Some(p) => p[d as usize],
            None => d,
        };
        value += digit as f64 * scale;
        scale *= inv_base;
        n /= base;
    }
    value
}

/// Halton points in (0,1)^dims, one row per point, starting at sequence index
/// `skip + 1`. With `scramble` the deterministic reverse-radix digit
/// permutation is applied per base, so equal arguments always give
/// bitwise-identical output.
pub fn halton_draws(dims: usize, count: usize, skip: usize, scramble: bool) -> Result<DMatrix<f64>> {
    if dims == 0 || dims > HALTON_PRIME_BASES.len() {
        return Err(Error::InvalidInput(format!(
            "halton supports 1..={} dimensions, got {dims}",
            HALTON_PRIME_BASES.len()
        )));
    }
    if count == 0 {
        return Err(Error::InvalidInput("halton count must be positive".into()));
    }
    let mut out = DMatrix::zeros(count, dims);
    for d in 0..dims {
        let base = HALTON_PRIME_BASES[d];
        let perm = scramble.then(|| reverse_radix_permutation(base));
        for i in 0..count {
            let n = (skip + i + 1) as u64;
            out[(i, d)] = radical_inverse(n, base, perm.as_deref());
        }
    }
    Ok(out)
}

/// Inverse standard normal CDF, accurate to |Phi(result) - u| <= 1e-12 on
/// (0,1). Rational minimax approximations on three regimes (central,
/// moderate tail, far tail).
pub fn normal_inverse_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidInput(format!(
            "normal_inverse_cdf requires u in (0,1), got {u}"
        )));
    }
    let q = u - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * central_rational(r));
    }
    let r = if q < 0.0 { u } else { 1.0 - u };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        tail_rational(r - 1.6)
    } else {
        far_tail_rational(r - 5.0)
    };
    Ok(if q < 0.0 { -x } else { x })
}

/// Horner evaluation; coefficients ordered highest degree first.
fn horner(r: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().fold(0.0, |acc, c| acc * r + c)
}

fn central_rational(r: f64) -> f64 {
    let num = horner(
        r,
        &[
            2509.0809287301226727,
            33430.575583588128105,
            67265.770927008700853,
            45921.953931549871457,
            13731.693765509461125,
            1971.5909503065514427,
            133.14166789178437745,
            3.387132872796366608,
        ],
    );
    let den = horner(
        r,
        &[
            5226.495278852545610,
            28729.085735721942674,
            39307.89580009271061,
            21213.794301586595867,
            5394.1960214247511077,
            687.1870074920579083,
            42.313330701600911252,
            1.0,
        ],
    );
    num / den
}

fn tail_rational(r: f64) -> f64 {
    let num = horner(
        r,
        &[
            7.7454501427834140764e-4,
            0.0227238449892691845833,
            0.24178072517745061177,
            1.27045825245236838258,
            3.64784832476320460504,
            5.7694972214606914055,
            4.6303378461565452959,
            1.42343711074968357734,
        ],
    );
    let den = horner(
        r,
        &[
            1.05075007164441684324e-9,
            5.475938084995344946e-4,
            0.0151986665636164571966,
            0.14810397642748007459,
            0.68976733498510000455,
            1.6763848301838038494,
            2.05319162663775882187,
            1.0,
        ],
    );
    num / den
}

fn far_tail_rational(r: f64) -> f64 {
    let num = horner(
        r,
        &[
            2.01033439929228813265e-7,
            2.71155556874348757815e-5,
            0.0012426609473880784386,
            0.026532189526576123093,
            0.29656057182850489123,
            1.7848265399172913358,
            5.4637849111641143699,
            6.6579046435011037772,
        ],
    );
    let den = horner(
        r,
        &[
            2.04426310338993978564e-15,
            1.4215117583164458887e-7,
            1.8463183175100546818e-5,
            7.868691311456132591e-4,
            0.0148753612908506148525,
            0.13692988092273580531,
            0.59983220655588793769,
            1.0,
        ],
    );
    num / den
}
