//! Two-sample Kolmogorov-Smirnov test.

use crate::error::{BdtError, Result};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // theta-function form, fast for small arguments
        let y = -PI * PI / (8.0 * lambda * lambda);
        let s: f64 = (1..=7).map(|k| ((2 * k - 1) as f64).powi(2) * y).map(f64::exp).sum();
        (1.0 - (2.0 * PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Largest gap between the empirical CDFs of `a` and `b`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(BdtError::InvalidArgument("KS test needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(BdtError::InvalidArgument("KS test input contains NaN".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Statistic and asymptotic p-value, with the small-sample adjustment of the
/// effective size `n_a n_b / (n_a + n_b)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let d = ks_statistic(a, b)?;
    let ne = (a.len() * b.len()) as f64 / (a.len() + b.len()) as f64;
    let s = ne.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((s + 0.12 + 0.11 / s) * d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn brute(a: &[f64], b: &[f64]) -> f64 {
        let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn trivial_cases() {
        let a = [0.3, 1.0, -2.0];
        let r = ks_two_sample(&a, &a).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        assert_eq!(ks_statistic(&[1., 2., 3.], &[4., 5., 6.]).unwrap(), 1.0);
        assert!(ks_two_sample(&[], &[1.0]).is_err());
    }

    #[test]
    fn q_branches_meet() {
        let lo = kolmogorov_q(1.18 - 1e-12);
        let hi = kolmogorov_q(1.18);
        assert!((lo - hi).abs() < 1e-10);
        // known quantiles
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_q(1.9496) - 0.001).abs() < 1e-4);
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let na = rng.random_range(1..300);
            let nb = rng.random_range(1..300);
            let a: Vec<f64> = (0..na).map(|_| rng.random_range(0..20) as f64).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.random_range(0..25) as f64).collect();
            assert!((ks_statistic(&a, &b).unwrap() - brute(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_at_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..7_000).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        assert!((ks_statistic(&a, &b).unwrap() - brute(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn null_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let reps = 200;
        let mut low = 0;
        for _ in 0..reps {
            let a: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
            if ks_two_sample(&a, &b).unwrap().p_value < 0.05 {
                low += 1;
            }
        }
        let frac = low as f64 / reps as f64;
        assert!((0.02..=0.09).contains(&frac), "{frac}");
    }

    proptest! {
        #[test]
        fn statistic_agrees_with_ecdf(a in prop::collection::vec(-5.0f64..5.0, 1..60),
                                      b in prop::collection::vec(-5.0f64..5.0, 1..60)) {
            prop_assert!((ks_statistic(&a, &b).unwrap() - brute(&a, &b)).abs() < 1e-12);
        }
    }
}
