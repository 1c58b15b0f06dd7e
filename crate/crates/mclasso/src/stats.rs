//! Chi-square quantiles via the regularized incomplete gamma function.

use crate::error::{Error, Result};

/// ln Gamma(x) for x > 0 (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEFFS[0];
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Lower regularized incomplete gamma P(a, x), accurate to ~1e-14.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series representation
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // continued fraction (modified Lentz)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
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
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (-x + a * x.ln() - ln_gamma(a)).exp() * h
    }
}

/// Chi-square CDF with `df` degrees of freedom.
pub fn chi_square_cdf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    gamma_p(df as f64 / 2.0, x / 2.0)
}

/// Chi-square quantile: smallest x with CDF(x) >= p, accurate to ~1e-10.
pub fn chi_square_quantile(p: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::Degenerate("chi-square with 0 degrees of freedom".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    // bracket then bisect with Newton polish
    let mut lo = 0.0f64;
    let mut hi = df as f64 + 10.0;
    while chi_square_cdf(hi, df) < p {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Convergence("chi-square quantile bracket failed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi_square_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * (1.0 + hi) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..10u64 {
            let fact: f64 = (1..n).map(|k| k as f64).product();
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "n = {n}");
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn chi_square_quantiles_match_tables() {
        // classic table values
        assert!((chi_square_quantile(0.95, 1).unwrap() - 3.841458821).abs() < 1e-6);
        assert!((chi_square_quantile(0.95, 4).unwrap() - 9.487729037).abs() < 1e-6);
        assert!((chi_square_quantile(0.99, 2).unwrap() - 9.210340372).abs() < 1e-6);
        assert!((chi_square_quantile(0.5, 10).unwrap() - 9.341818120).abs() < 1e-6);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for df in [1usize, 3, 8, 15] {
            for p in [0.01, 0.25, 0.5, 0.9, 0.999] {
                let q = chi_square_quantile(p, df).unwrap();
                assert!((chi_square_cdf(q, df) - p).abs() < 1e-10, "df={df} p={p}");
            }
        }
    }
}
