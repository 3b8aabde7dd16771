//! Gradient-free numerical primitives. The graph ops in [`crate::autodiff`]
//! call the same row kernels, so plain and differentiable paths agree bitwise.

use crate::error::{PalError, Result};
use crate::tensor::{pairwise_dot, pairwise_sum};

/// Floor under which a vector norm is treated as zero.
pub const L2_EPS: f64 = 1e-12;

/// Returns `x / max(|x|, eps)`.
pub fn l2_normalize(x: &[f64], eps: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    l2_normalize_in_place(&mut out, eps);
    out
}

/// Normalizes in place and returns the pre-normalization norm.
pub(crate) fn l2_normalize_in_place(x: &mut [f64], eps: f64) -> f64 {
    let norm = pairwise_dot(x, x).sqrt();
    let denom = norm.max(eps);
    for v in x.iter_mut() {
        *v /= denom;
    }
    norm
}

pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(PalError::Domain("log_sum_exp of an empty vector".into()));
    }
    Ok(lse_unchecked(v))
}

pub(crate) fn lse_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let shifted: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    max + pairwise_sum(&shifted).ln()
}

/// `softmax(v / tau)`.
pub fn softmax_temperature(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(PalError::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    if v.is_empty() {
        return Err(PalError::Domain("softmax of an empty vector".into()));
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / tau).collect();
    Ok(softmax_row(&scaled))
}

pub(crate) fn softmax_row(v: &[f64]) -> Vec<f64> {
    let lse = lse_unchecked(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

pub(crate) fn log_softmax_row(v: &[f64]) -> Vec<f64> {
    let lse = lse_unchecked(v);
    v.iter().map(|x| x - lse).collect()
}

/// Shannon entropy `-sum p log p` with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    let terms: Vec<f64> = p.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).collect();
    pairwise_sum(&terms)
}

/// Cross-entropy `H(p, q) = -sum p log q`, with `q` floored at `floor`.
/// Returns the value and the number of floored entries that carried mass.
pub fn cross_entropy(p: &[f64], q: &[f64], floor: f64) -> Result<(f64, usize)> {
    if p.len() != q.len() {
        return Err(crate::error::dim_err("cross_entropy", format!("{} vs {}", p.len(), q.len())));
    }
    let mut floored = 0;
    let terms: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                return 0.0;
            }
            if qi < floor {
                floored += 1;
            }
            -pi * qi.max(floor).ln()
        })
        .collect();
    Ok((pairwise_sum(&terms), floored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn l2_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0], L2_EPS), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0], 1e-12), vec![0.0, 0.0]);
    }

    #[test]
    fn lse_examples() {
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!(big.is_finite());
        assert_abs_diff_eq!(big, 1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn lse_of_copies() {
        for n in 1..20 {
            let v = vec![0.37; n];
            assert_abs_diff_eq!(log_sum_exp(&v).unwrap(), 0.37 + (n as f64).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temperature(&[0.0, 0.0, 0.0], 0.5).unwrap();
        for x in p {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax_temperature(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
        assert!(softmax_temperature(&[1.0], 0.0).is_err());
        assert!(softmax_temperature(&[1.0], -1.0).is_err());
    }

    #[test]
    fn softmax_flattens_monotonically_with_temperature() {
        let v = [1.3, -0.2, 0.7, 2.1];
        let mut prev = f64::INFINITY;
        for tau in [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0, 100.0] {
            let p = softmax_temperature(&v, tau).unwrap();
            let dev = p.iter().map(|x| (x - 0.25).abs()).fold(0.0, f64::max);
            assert!(dev < prev, "tau {tau}: {dev} !< {prev}");
            prev = dev;
        }
        assert!(prev < 0.01);
    }

    #[test]
    fn entropy_and_cross_entropy() {
        assert_abs_diff_eq!(entropy(&[0.5, 0.5]), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        let (h, floored) = cross_entropy(&[1.0, 0.0], &[0.0, 1.0], 1e-12).unwrap();
        assert_eq!(floored, 1);
        assert_abs_diff_eq!(h, -(1e-12f64).ln(), epsilon = 1e-9);
    }
}
