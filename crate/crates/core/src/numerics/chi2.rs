use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
///
/// Series expansion below `x = a + 1`, modified Lentz continued fraction for
/// the upper tail above it.
pub fn regularized_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        (1.0 - (h.ln() + log_prefix).exp()).max(0.0)
    }
}

pub fn chi2_cdf(dof: usize, q: f64) -> f64 {
    regularized_lower_gamma(0.5 * dof as f64, 0.5 * q)
}

/// The `p`-quantile of the chi-square distribution with `dof` degrees of
/// freedom, by bisection on the CDF.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Domain("chi-square needs at least one degree of freedom".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile level {p} outside (0, 1)")));
    }
    let mut lo = 0.0;
    let mut hi = dof as f64 + 10.0;
    while chi2_cdf(dof, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(dof, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn reference_quantiles() {
        assert!((chi2_quantile(1, 0.95).unwrap() - 3.841_458_820_694_124).abs() < 1e-6);
        // Closed form for two degrees of freedom: -2 ln(1 - p).
        let two = -2.0 * 0.05f64.ln();
        assert!((chi2_quantile(2, 0.95).unwrap() - two).abs() < 1e-9);
        assert!((chi2_quantile(10, 0.95).unwrap() - 18.307_038_053_275_146).abs() < 1e-6);
    }

    #[test]
    fn cdf_of_quantile_is_level() {
        for dof in [1, 2, 3, 5, 10, 20, 40, 64] {
            for p in [0.001, 0.05, 0.5, 0.9, 0.95, 0.999] {
                let q = chi2_quantile(dof, p).unwrap();
                assert!((chi2_cdf(dof, q) - p).abs() < 1e-6, "dof {dof} p {p}");
            }
        }
    }

    #[test]
    fn agrees_with_statrs() {
        for dof in [1usize, 4, 10, 20] {
            let dist = ChiSquared::new(dof as f64).unwrap();
            for p in [0.01, 0.3, 0.95, 0.99] {
                let ours = chi2_quantile(dof, p).unwrap();
                let theirs = dist.inverse_cdf(p);
                assert!((ours - theirs).abs() < 1e-6 * theirs.max(1.0));
                assert!((chi2_cdf(dof, ours) - dist.cdf(ours)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn monotone_in_level_and_dof() {
        let levels: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for dof in 1..=30 {
            let qs: Vec<f64> = levels.iter().map(|&p| chi2_quantile(dof, p).unwrap()).collect();
            assert!(qs.windows(2).all(|w| w[0] < w[1]));
        }
        for &p in &levels {
            let qs: Vec<f64> = (1..=30).map(|d| chi2_quantile(d, p).unwrap()).collect();
            assert!(qs.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(chi2_quantile(3, 0.0), Err(Error::Domain(_))));
        assert!(matches!(chi2_quantile(3, 1.0), Err(Error::Domain(_))));
        assert!(matches!(chi2_quantile(3, f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12 * fact.ln().max(1.0));
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }
}
