//! Scalar distribution functions: standard normal, chi-squared quantiles and
//! the regularized incomplete gamma function behind them.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Standard normal CDF, accurate in both tails.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Upper tail `1 - norm_cdf(x)` without cancellation.
#[inline]
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Standard normal quantile.
///
/// Acklam's rational approximation (relative error ~1e-9) followed by one
/// Halley refinement against [`norm_cdf`], which brings the result to full
/// double precision including the far tails.
pub fn norm_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("normal quantile requires 0 < q < 1, got {q}")));
    }
    if q == 0.5 {
        return Ok(0.0);
    }
    let x = acklam(q);
    // Residual F(x) - q, evaluated on the tail that keeps precision.
    let e = if x < 0.0 { norm_cdf(x) - q } else { (1.0 - q) - norm_sf(x) };
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

fn acklam(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const LOW: f64 = 0.02425;
    if q < LOW {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    } else if q <= 1.0 - LOW {
        let s = q - 0.5;
        let r = s * s;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * s
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let r = (-2.0 * (1.0 - q).ln()).sqrt();
        -(((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    }
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_continued_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_continued_fraction(a, x)
    }
}

fn log_prefactor(a: f64, x: f64) -> f64 {
    a * x.ln() - x - libm::lgamma(a)
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..10_000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * log_prefactor(a, x).exp()
}

/// Modified Lentz evaluation of the continued fraction for `Q(a, x)`.
fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    log_prefactor(a, x).exp() * h
}

/// CDF of the chi-squared distribution with `dof` degrees of freedom.
pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    regularized_gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// Quantile of the chi-squared distribution by bisection on [`chi2_cdf`].
pub fn chi2_quantile(dof: usize, q: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::arg("chi-squared degrees of freedom must be positive"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("chi-squared quantile requires 0 < q < 1, got {q}")));
    }
    let mut lo = 0.0;
    let mut hi = dof as f64 + 10.0;
    while chi2_cdf(dof, hi) < q {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_cdf(dof, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Huber tuning constant `sqrt(chi2_quantile(p, q))`.
pub fn huber_constant(dim: usize, q: f64) -> Result<f64> {
    Ok(chi2_quantile(dim, q)?.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent Maclaurin series for erf, valid for moderate |x|.
    fn erf_series(x: f64) -> f64 {
        let mut sum = 0.0;
        let mut term = x;
        let mut n = 0.0;
        loop {
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
            n += 1.0;
            term *= -x * x / n;
        }
        2.0 / PI.sqrt() * sum
    }

    #[test]
    fn cdf_center_and_symmetry() {
        assert_eq!(norm_cdf(0.0), 0.5);
        for &x in &[0.1, 0.7, 1.3, 2.5, 4.0, 7.5] {
            assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn quantile_matches_bisection_on_erf_series() {
        let target = 0.975;
        let (mut lo, mut hi) = (0.0f64, 4.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 0.5 * (1.0 + erf_series(mid / SQRT_2)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let q = norm_quantile(target).unwrap();
        assert!((q - oracle).abs() < 1e-12, "{q} vs {oracle}");
        assert!((q - 1.959964).abs() < 1e-6);
    }

    #[test]
    fn quantile_round_trips_deep_tails() {
        let mut q = 1e-6;
        while q < 1.0 - 1e-6 {
            let x = norm_quantile(q).unwrap();
            assert!((norm_cdf(x) - q).abs() <= 1e-12 * q.max(1e-3), "q={q}");
            q += 0.0123;
        }
        for &q in &[1e-12, 1e-9, 5e-7, 0.001] {
            let x = norm_quantile(q).unwrap();
            assert!(((norm_cdf(x) - q) / q).abs() < 1e-12);
            let upper = 1.0 - q;
            let exact_tail = 1.0 - upper;
            assert!((norm_quantile(upper).unwrap() + norm_quantile(exact_tail).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn quantile_domain_errors() {
        assert!(matches!(norm_quantile(0.0), Err(Error::Domain(_))));
        assert!(matches!(norm_quantile(1.0), Err(Error::Domain(_))));
        assert!(matches!(norm_quantile(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn chi2_closed_forms() {
        let x = chi2_quantile(2, 0.99).unwrap();
        assert!((x - (-2.0 * 0.01f64.ln())).abs() < 1e-10);
        assert!((x - 9.21034).abs() < 1e-5);
        let z = norm_quantile(0.975).unwrap();
        assert!((chi2_quantile(1, 0.95).unwrap() - z * z).abs() < 1e-9);
        let med = chi2_quantile(4, 0.5).unwrap();
        assert!((chi2_cdf(4, med) - 0.5).abs() < 1e-10);
        // chi2_4 CDF has the closed form 1 - e^{-x/2}(1 + x/2).
        assert!((1.0 - (-med / 2.0).exp() * (1.0 + med / 2.0) - 0.5).abs() < 1e-10);
        assert!(chi2_quantile(3, 1.0).is_err());
        assert!(chi2_quantile(3, 0.0).is_err());
    }

    #[test]
    fn chi2_monotone_in_dof_and_level() {
        let qs = [0.05, 0.25, 0.5, 0.9, 0.99, 0.999];
        for p in 1..8 {
            let row: Vec<f64> = qs.iter().map(|&q| chi2_quantile(p, q).unwrap()).collect();
            assert!(row.windows(2).all(|w| w[0] < w[1]));
            for (i, &q) in qs.iter().enumerate() {
                assert!(chi2_quantile(p + 1, q).unwrap() > row[i]);
            }
        }
    }

    #[test]
    fn incomplete_gamma_branches_agree() {
        for &a in &[0.5, 1.0, 2.5, 7.0] {
            for &x in &[0.1, 1.0, a + 1.0, 10.0] {
                assert!((regularized_gamma_p(a, x) + regularized_gamma_q(a, x) - 1.0).abs() < 1e-14);
            }
        }
        // P(1, x) = 1 - e^{-x}
        assert!((regularized_gamma_p(1.0, 3.0) - (1.0 - (-3.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn huber_constant_two_dimensions() {
        let k = huber_constant(2, 0.99).unwrap();
        assert!((k - (-2.0 * 0.01f64.ln()).sqrt()).abs() < 1e-9);
        assert!((k - 3.0349).abs() < 1e-4);
    }
}
