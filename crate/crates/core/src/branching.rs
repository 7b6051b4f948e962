//! The tree viewed as a multitype continuous-time branching process: a branch
//! carrying n particles is an individual of type n, and the expected numbers
//! of leaves follow from the exponential of the infinitesimal generator.

use crate::error::{BdtError, Result};
use crate::params::Hyperparams;
use crate::special::{harmonic_unchecked, ln_beta, ln_choose};
use nalgebra::DMatrix;

fn check_type(n: usize) -> Result<()> {
    if n == 0 {
        Err(BdtError::InvalidArgument("particle type must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// (mu_n, beta_n): total stop and replicate event rates of a type-n branch.
pub fn event_rates(n: usize, hp: &Hyperparams) -> Result<(f64, f64)> {
    check_type(n)?;
    hp.validate_tree()?;
    Ok((
        hp.lambda_s * hp.theta_s * harmonic_unchecked(hp.theta_s, n),
        hp.lambda_r * hp.theta_r * harmonic_unchecked(hp.theta_r, n),
    ))
}

/// phi_{n,k}, k = 1..n: probability that a replicate event on a type-n branch
/// sends k particles down the divergent branch. Entry `k-1` holds phi_{n,k}.
pub fn offspring_birth_probs(n: usize, theta_r: f64) -> Result<Vec<f64>> {
    check_type(n)?;
    let h = harmonic_unchecked(theta_r, n);
    Ok((1..=n)
        .map(|k| (ln_choose(n, k) + ln_beta(theta_r + (n - k) as f64, k as f64)).exp() / h)
        .collect())
}

/// eta_{n,k}, k = 0..n-1: probability that a stop event on a type-n branch
/// leaves k particles continuing. Entry `k` holds eta_{n,k}.
pub fn offspring_stop_probs(n: usize, theta_s: f64) -> Result<Vec<f64>> {
    check_type(n)?;
    let h = harmonic_unchecked(theta_s, n);
    Ok((0..n)
        .map(|k| (ln_choose(n, k) + ln_beta(theta_s + k as f64, (n - k) as f64)).exp() / h)
        .collect())
}

/// Offspring laws and mean offspring matrix for types 1..=N.
#[derive(Clone, Debug)]
pub struct OffspringDistribution {
    /// phi[n-1][k-1] = phi_{n,k}
    pub phi: Vec<Vec<f64>>,
    /// eta[n-1][k] = eta_{n,k}
    pub eta: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub beta: Vec<f64>,
    /// f[(n-1, k-1)]: expected number of type-k offspring of a type-n individual.
    pub f: DMatrix<f64>,
}

impl OffspringDistribution {
    pub fn new(n_max: usize, hp: &Hyperparams) -> Result<Self> {
        check_type(n_max)?;
        hp.validate_tree()?;
        let mut phi = Vec::with_capacity(n_max);
        let mut eta = Vec::with_capacity(n_max);
        let mut mu = Vec::with_capacity(n_max);
        let mut beta = Vec::with_capacity(n_max);
        let mut f = DMatrix::zeros(n_max, n_max);
        for n in 1..=n_max {
            let (m, b) = event_rates(n, hp)?;
            let ph = offspring_birth_probs(n, hp.theta_r)?;
            let et = offspring_stop_probs(n, hp.theta_s)?;
            for k in 1..=n {
                let stop = if k < n { m * et[k] } else { 0.0 };
                let birth = b * (ph[k - 1] + if k == n { 1.0 } else { 0.0 });
                f[(n - 1, k - 1)] = (stop + birth) / (m + b);
            }
            phi.push(ph);
            eta.push(et);
            mu.push(m);
            beta.push(b);
        }
        Ok(OffspringDistribution { phi, eta, mu, beta, f })
    }

    /// Generator built as rate × (mean offspring − identity).
    pub fn generator(&self) -> DMatrix<f64> {
        let n = self.mu.len();
        DMatrix::from_fn(n, n, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            (self.mu[i] + self.beta[i]) * (self.f[(i, j)] - delta)
        })
    }
}

/// Closed-form infinitesimal generator for types 1..=N; entry (i-1, j-1)
/// holds g_{i,j}.
pub fn generator_matrix(n_max: usize, hp: &Hyperparams) -> Result<DMatrix<f64>> {
    check_type(n_max)?;
    hp.validate_tree()?;
    let (ls, lr, ts, tr) = (hp.lambda_s, hp.lambda_r, hp.theta_s, hp.theta_r);
    Ok(DMatrix::from_fn(n_max, n_max, |i0, j0| {
        let (i, j) = (i0 + 1, j0 + 1);
        if j > i {
            0.0
        } else if j == i {
            tr * lr * ln_beta(tr, i as f64).exp() - ts * ls * harmonic_unchecked(ts, i)
        } else {
            let c = ln_choose(i, j);
            ts * ls * (c + ln_beta(ts + j as f64, (i - j) as f64)).exp()
                + tr * lr * (c + ln_beta(tr + (i - j) as f64, j as f64)).exp()
        }
    }))
}

/// Matrix exponential via scaling and squaring with a Padé approximant.
pub fn matrix_exponential(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !g.is_square() {
        return Err(BdtError::InvalidArgument(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            g.nrows(),
            g.ncols()
        )));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(BdtError::InvalidArgument("matrix has non-finite entries".into()));
    }
    Ok(g.clone().exp())
}

/// Expected leaf counts of a tree over N objects.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafCounts {
    /// by_size[j-1] = E[number of leaves carrying exactly j objects]
    pub by_size: Vec<f64>,
    pub total: f64,
}

pub fn expected_leaf_counts(n: usize, hp: &Hyperparams) -> Result<LeafCounts> {
    let g = generator_matrix(n, hp)?;
    let m = matrix_exponential(&g)?;
    let by_size: Vec<f64> = m.row(n - 1).iter().copied().collect();
    let total = by_size.iter().sum();
    Ok(LeafCounts { by_size, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let norm = a.iter().map(|x| x.abs()).sum::<f64>();
        let s = (norm.max(1.0).log2().ceil() as i32 + 4).max(0);
        let b = a / 2f64.powi(s);
        let n = a.nrows();
        let mut term = DMatrix::identity(n, n);
        let mut sum = DMatrix::identity(n, n);
        for k in 1..40 {
            term = &term * &b / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn rates() {
        let hp = Hyperparams::tree(1.7, 0.4, 2.3, 0.6);
        let (mu, beta) = event_rates(1, &hp).unwrap();
        assert!((mu - 1.7).abs() < 1e-14 && (beta - 0.4).abs() < 1e-14);
        let (mu2, _) = event_rates(2, &Hyperparams::tree(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert!((mu2 - 1.5).abs() < 1e-14);
        assert!(event_rates(0, &hp).is_err());
    }

    #[test]
    fn offspring_examples() {
        assert!((offspring_birth_probs(1, 0.3).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!((offspring_stop_probs(1, 0.3).unwrap()[0] - 1.0).abs() < 1e-15);
        let phi = offspring_birth_probs(2, 1.0).unwrap();
        assert!((phi[0] - 2.0 / 3.0).abs() < 1e-14 && (phi[1] - 1.0 / 3.0).abs() < 1e-14);
        let eta = offspring_stop_probs(2, 1.0).unwrap();
        assert!((eta[0] - 1.0 / 3.0).abs() < 1e-14 && (eta[1] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn truncated_beta_binomial_limit() {
        // finite-L beta-binomial with parameters (theta/L, theta) conditioned on a
        // nonzero count approaches phi as L grows
        let (n, theta, l) = (4usize, 1.3f64, 1e6f64);
        let a = theta / l;
        let b = theta;
        let pk: Vec<f64> = (0..=n)
            .map(|k| (ln_choose(n, k) + ln_beta(a + k as f64, b + (n - k) as f64) - ln_beta(a, b)).exp())
            .collect();
        let nonzero: f64 = pk[1..].iter().sum();
        let phi = offspring_birth_probs(n, theta).unwrap();
        for k in 1..=n {
            assert!((pk[k] / nonzero - phi[k - 1]).abs() < 1e-5, "{k}");
        }
    }

    #[test]
    fn normalized() {
        for n in 1..=64 {
            for &th in &[0.2, 1.0, 4.5] {
                let s: f64 = offspring_birth_probs(n, th).unwrap().iter().sum();
                let e: f64 = offspring_stop_probs(n, th).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{n} {th} {s}");
                assert!((e - 1.0).abs() < 1e-12, "{n} {th} {e}");
            }
        }
    }

    #[test]
    fn generator_routes_agree() {
        let hp = Hyperparams::tree(0.9, 1.4, 0.7, 2.2);
        let g = generator_matrix(12, &hp).unwrap();
        let g2 = OffspringDistribution::new(12, &hp).unwrap().generator();
        assert!((&g - &g2).amax() < 1e-10);
        for i in 0..12 {
            for j in i + 1..12 {
                assert_eq!(g[(i, j)], 0.0);
            }
        }
        assert!((g[(0, 0)] - (hp.lambda_r - hp.lambda_s)).abs() < 1e-12);
    }

    #[test]
    fn expm_cases() {
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(matrix_exponential(&z).unwrap(), DMatrix::identity(4, 4));
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-2.0, 0.5, 1.5]));
        let e = matrix_exponential(&d).unwrap();
        for i in 0..3 {
            assert!((e[(i, i)] - d[(i, i)].exp()).abs() < 1e-12 * d[(i, i)].exp());
        }
        let g = DMatrix::from_row_slice(2, 2, &[-0.7, 0.0, 1.3, 0.4]);
        let e = matrix_exponential(&g).unwrap();
        let want = 1.3 * (0.4f64.exp() - (-0.7f64).exp()) / (0.4 + 0.7);
        assert!((e[(1, 0)] - want).abs() < 1e-10);
        assert!(matrix_exponential(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn expm_matches_taylor_on_generators() {
        for (n, hp) in [
            (10, Hyperparams::tree(1.0, 1.5, 1.0, 1.0)),
            (40, Hyperparams::tree(2.0, 0.3, 0.5, 3.0)),
            (64, Hyperparams::tree(0.5, 2.0, 4.0, 0.2)),
        ] {
            let g = generator_matrix(n, &hp).unwrap();
            let a = matrix_exponential(&g).unwrap();
            let b = taylor_expm(&g);
            let scale = b.amax();
            assert!((&a - &b).amax() <= 1e-9 * scale, "{n}");
        }
    }

    #[test]
    fn single_object_leaves() {
        let hp = Hyperparams::tree(0.8, 1.7, 2.0, 0.5);
        let k = expected_leaf_counts(1, &hp).unwrap();
        assert!((k.total - (1.7f64 - 0.8).exp()).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_replicate_rate() {
        for n in [2, 10, 30] {
            let mut prev = 0.0;
            for i in 0..10 {
                let lr = 0.2 + 0.3 * i as f64;
                let k = expected_leaf_counts(n, &Hyperparams::tree(1.0, lr, 1.0, 1.0)).unwrap();
                assert!(k.by_size.iter().all(|&x| x >= -1e-12));
                assert!(k.total >= prev);
                prev = k.total;
            }
        }
    }

    #[test]
    fn no_overflow_large_n() {
        let hp = Hyperparams::tree(1.0, 1.0, 1.0, 1.0);
        let o = OffspringDistribution::new(256, &hp).unwrap();
        assert!(o.f.iter().all(|x| x.is_finite()));
    }
}
