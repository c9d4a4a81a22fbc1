//! Exact binomial bounds and the standard normal quantile.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// Standard normal CDF via the complementary error function.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `z` with `norm_cdf(z) == p`, by safeguarded Newton iteration.
pub fn inv_norm_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "quantile argument {p} is outside (0, 1)"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // 1 - p is exact for p >= 0.5, so solving in the lower tail loses nothing.
    let q = p.min(1.0 - p);
    let z = lower_tail_quantile(q);
    Ok(if p < 0.5 { z } else { -z })
}

fn lower_tail_quantile(q: f64) -> f64 {
    // Rational starting approximation, |error| < 4.5e-4.
    let t = (-2.0 * q.ln()).sqrt();
    let mut z = -(t
        - (2.515517 + 0.802853 * t + 0.010328 * t * t)
            / (1.0 + 1.432788 * t + 0.189269 * t * t + 0.001308 * t * t * t));
    let (mut lo, mut hi) = (-40.0f64, 0.0f64);
    for _ in 0..200 {
        let f = norm_cdf(z) - q;
        if f < 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let mut next = z - f / norm_pdf(z);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - z).abs() <= 1e-15 * z.abs().max(1.0) || hi - lo <= 1e-15 {
            return next;
        }
        z = next;
    }
    z
}

/// `P(Bin(n, p) >= k)`, summed in the log domain.
pub fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    // ln C(n, k)
    let mut log_choose: f64 = (0..k)
        .map(|j| ((n - j) as f64).ln() - ((j + 1) as f64).ln())
        .sum();
    let mut terms = Vec::with_capacity((n - k + 1) as usize);
    for i in k..=n {
        terms.push(log_choose + i as f64 * lp + (n - i) as f64 * lq);
        if i < n {
            log_choose += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total = m.exp() * terms.iter().map(|t| (t - m).exp()).sum::<f64>();
    total.min(1.0)
}

/// One-sided Clopper-Pearson lower confidence bound for a binomial proportion:
/// the largest `L` with `P(Bin(n, L) >= k) <= alpha`.
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} is outside (0, 1)")));
    }
    if n == 0 || k > n {
        return Err(Error::invalid(format!(
            "need 0 <= k <= n with n >= 1, got k={k}, n={n}"
        )));
    }
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok(alpha.powf(1.0 / n as f64));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if binomial_upper_tail(k, n, mid) <= alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Two-sided exact binomial test of `k` successes in `n` trials against
/// `p = 1/2`.
pub fn binom_test_half(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let extreme = k.max(n - k);
    if 2 * extreme == n {
        return 1.0;
    }
    (2.0 * binomial_upper_tail(extreme, n, 0.5)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_reference_points() {
        assert_eq!(inv_norm_cdf(0.5).unwrap(), 0.0);
        assert!((inv_norm_cdf(0.975).unwrap() - 1.959963984540054).abs() < 1e-9);
        assert!((inv_norm_cdf(0.025).unwrap() + 1.959963984540054).abs() < 1e-9);
        assert!((inv_norm_cdf(1e-300).unwrap() + 37.0471).abs() < 1e-3);
    }

    #[test]
    fn quantile_rejects_out_of_range() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(inv_norm_cdf(p).is_err());
        }
    }

    #[test]
    fn all_successes_close_form() {
        let v = clopper_pearson_lower(100, 100, 0.001).unwrap();
        assert!((v - 0.001f64.powf(0.01)).abs() < 1e-15);
        assert!((v - 0.933254).abs() < 1e-6);
    }

    #[test]
    fn no_successes_is_zero() {
        for n in [1, 7, 400] {
            assert_eq!(clopper_pearson_lower(0, n, 0.05).unwrap(), 0.0);
        }
    }

    #[test]
    fn bound_rejects_bad_arguments() {
        assert!(clopper_pearson_lower(3, 10, 0.0).is_err());
        assert!(clopper_pearson_lower(3, 10, 1.0).is_err());
        assert!(clopper_pearson_lower(11, 10, 0.05).is_err());
        assert!(clopper_pearson_lower(0, 0, 0.05).is_err());
    }

    #[test]
    fn tail_edges() {
        assert_eq!(binomial_upper_tail(0, 5, 0.3), 1.0);
        assert_eq!(binomial_upper_tail(6, 5, 0.3), 0.0);
        assert!((binomial_upper_tail(5, 5, 0.5) - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn binomial_test_symmetry() {
        assert_eq!(binom_test_half(50, 100), 1.0);
        assert!((binom_test_half(60, 100) - binom_test_half(40, 100)).abs() < 1e-15);
        assert!((binom_test_half(100, 100) - 2.0f64.powi(-99)).abs() < 1e-40);
    }
}
