use crate::error::{BdtError, Result};
use statrs::function::gamma::{digamma, ln_gamma};

/// log B(a, b) for positive arguments.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// log of the binomial coefficient C(n, k).
pub fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// H_n^alpha = sum_{i=0}^{n-1} 1/(alpha+i) without argument checks.
pub(crate) fn harmonic_unchecked(alpha: f64, n: usize) -> f64 {
    if n <= 64 {
        (0..n).map(|i| 1.0 / (alpha + i as f64)).sum()
    } else {
        digamma(alpha + n as f64) - digamma(alpha)
    }
}

/// Generalized harmonic number H_n^alpha = psi(alpha+n) - psi(alpha).
pub fn harmonic(alpha: f64, n: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(BdtError::InvalidArgument(format!(
            "harmonic number needs alpha > 0, got {alpha}"
        )));
    }
    Ok(harmonic_unchecked(alpha, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_values() {
        assert_eq!(harmonic(2.5, 0).unwrap(), 0.0);
        assert!((harmonic(0.3, 1).unwrap() - 1.0 / 0.3).abs() < 1e-15);
        assert!((harmonic(1.0, 2).unwrap() - 1.5).abs() < 1e-15);
        let direct: f64 = (0..25).map(|i| 1.0 / (0.7 + i as f64)).sum();
        assert!((harmonic(0.7, 25).unwrap() - direct).abs() < 1e-12);
        assert!(harmonic(0.0, 3).is_err());
        assert!(harmonic(-1.0, 3).is_err());
    }

    #[test]
    fn digamma_branch_matches_sum() {
        for &alpha in &[0.05, 0.7, 1.0, 3.3, 40.0] {
            for &n in &[65usize, 100, 300] {
                let direct: f64 = (0..n).map(|i| 1.0 / (alpha + i as f64)).sum();
                let h = harmonic(alpha, n).unwrap();
                assert!((h - direct).abs() < 1e-11 * direct.max(1.0), "{alpha} {n} {h} {direct}");
            }
        }
    }

    #[test]
    fn ln_beta_small_cases() {
        assert!((ln_beta(1.0, 1.0)).abs() < 1e-14);
        assert!((ln_beta(2.0, 1.0) - 0.5f64.ln()).abs() < 1e-14);
        assert!((ln_beta(2.0, 3.0) - (1.0f64 / 12.0).ln()).abs() < 1e-13);
        assert!((ln_choose(5, 2) - 10f64.ln()).abs() < 1e-13);
    }
}
