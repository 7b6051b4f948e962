use crate::error::{BdtError, Result};
use serde::{Deserialize, Serialize};

/// Rates and concentrations of the tree prior plus the factor-model noise scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_s: f64,
    pub lambda_r: f64,
    pub theta_s: f64,
    pub theta_r: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda_s: 1.0,
            lambda_r: 1.0,
            theta_s: 1.0,
            theta_r: 1.0,
            sigma_x: 1.0,
            sigma_y: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn tree(lambda_s: f64, lambda_r: f64, theta_s: f64, theta_r: f64) -> Self {
        Hyperparams {
            lambda_s,
            lambda_r,
            theta_s,
            theta_r,
            ..Default::default()
        }
    }

    /// Checks the tree-prior parameters are finite and positive.
    pub fn validate_tree(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_r", self.lambda_r),
            ("theta_s", self.theta_s),
            ("theta_r", self.theta_r),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(BdtError::InvalidHyperparameter { name, value: v });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_tree()?;
        for (name, v) in [("sigma_x", self.sigma_x), ("sigma_y", self.sigma_y)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(BdtError::InvalidHyperparameter { name, value: v });
            }
        }
        Ok(())
    }
}

/// Gamma(shape, rate) priors on the rates, concentrations and noise precisions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub rate_shape: f64,
    pub rate_rate: f64,
    pub concentration_shape: f64,
    pub concentration_rate: f64,
    pub precision_shape: f64,
    pub precision_rate: f64,
}

impl Default for HyperPrior {
    fn default() -> Self {
        HyperPrior {
            rate_shape: 1.0,
            rate_rate: 1.0,
            concentration_shape: 1.0,
            concentration_rate: 1.0,
            precision_shape: 1.0,
            precision_rate: 1.0,
        }
    }
}

impl HyperPrior {
    /// Draws a full set of hyperparameters from the prior. The noise scales are
    /// drawn through their precisions.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Hyperparams {
        use rand_distr::{Distribution, Gamma};
        let g =
            |shape: f64, rate: f64, rng: &mut R| Gamma::new(shape, 1.0 / rate).expect("valid gamma prior").sample(rng);
        let lambda_s = g(self.rate_shape, self.rate_rate, rng);
        let lambda_r = g(self.rate_shape, self.rate_rate, rng);
        let theta_s = g(self.concentration_shape, self.concentration_rate, rng);
        let theta_r = g(self.concentration_shape, self.concentration_rate, rng);
        let px = g(self.precision_shape, self.precision_rate, rng);
        let py = g(self.precision_shape, self.precision_rate, rng);
        Hyperparams {
            lambda_s,
            lambda_r,
            theta_s,
            theta_r,
            sigma_x: px.powf(-0.5),
            sigma_y: py.powf(-0.5),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_values() {
        let mut h = Hyperparams::default();
        assert!(h.validate().is_ok());
        h.theta_r = 0.0;
        assert!(matches!(
            h.validate_tree(),
            Err(BdtError::InvalidHyperparameter { name: "theta_r", .. })
        ));
        h.theta_r = 1.0;
        h.sigma_y = f64::NAN;
        assert!(h.validate().is_err());
    }
}
