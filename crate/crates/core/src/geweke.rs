//! Joint-distribution tests of the sampler: draws of (parameters, data) from
//! the generative model are compared with a chain that alternates sampler
//! updates and fresh data.

use crate::error::{BdtError, Result};
use crate::factor::{sample_data, Dataset};
use crate::ks::ks_two_sample;
use crate::mcmc::{stream_rng, ChainState, FlatLikelihood, Sampler, SamplerConfig};
use crate::params::{HyperPrior, Hyperparams};
use crate::prior::simulate_tree;
use crate::tree::{NodeKind, Tree};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

pub const STATISTIC_NAMES: [&str; 12] = [
    "K",
    "replicate_nodes",
    "stop_nodes",
    "nnz",
    "density",
    "first_time",
    "theta_s",
    "theta_r",
    "lambda_s",
    "lambda_r",
    "sigma_x",
    "sigma_y",
];

/// Integer-valued statistics, which get uniform jitter before the KS test.
pub const DISCRETE: [bool; 12] = [
    true, true, true, true, false, false, false, false, false, false, false, false,
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StatisticVector(pub [f64; 12]);

impl StatisticVector {
    pub fn new(tree: &Tree, hp: &Hyperparams) -> Self {
        let z = tree.feature_matrix();
        let k = z.n_features();
        let nnz = z.nnz();
        let density = if k == 0 {
            0.0
        } else {
            nnz as f64 / (tree.n_objects() * k) as f64
        };
        let first = tree
            .get(tree.root())
            .and_then(|r| r.original_child())
            .map_or(1.0, |c| tree.n(c).time());
        StatisticVector([
            k as f64,
            tree.count_kind(NodeKind::Replicate) as f64,
            tree.count_kind(NodeKind::Stop) as f64,
            nnz as f64,
            density,
            first,
            hp.theta_s,
            hp.theta_r,
            hp.lambda_s,
            hp.lambda_r,
            hp.sigma_x,
            hp.sigma_y,
        ])
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        STATISTIC_NAMES.iter().position(|&n| n == name).map(|i| self.0[i])
    }
}

/// Transition kernel under test.
pub trait GewekeKernel {
    fn step(&mut self, state: &mut ChainState, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<()>;
}

impl GewekeKernel for Sampler {
    fn step(&mut self, state: &mut ChainState, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<()> {
        self.iterate(state, data, rng)
    }
}

/// Ignores the data and redraws everything from the prior. Leaves the joint
/// distribution invariant trivially, so the test must pass with it.
#[derive(Clone, Debug)]
pub struct PriorRedraw {
    pub prior: HyperPrior,
}

impl GewekeKernel for PriorRedraw {
    fn step(&mut self, state: &mut ChainState, data: &Dataset, rng: &mut ChaCha8Rng) -> Result<()> {
        let fresh = ChainState::from_prior(state.tree.n_objects(), &self.prior, &FlatLikelihood, rng)?;
        state.tree = fresh.tree;
        state.hp = fresh.hp;
        state.refresh(data)
    }
}

#[derive(Clone, Debug)]
pub struct GewekeConfig {
    pub n_objects: usize,
    pub dim: usize,
    /// Number of recorded draws from each scheme.
    pub samples: usize,
    /// Kernel steps between recorded successive draws.
    pub thinning: usize,
    /// Successive-chain steps discarded before recording; the add/remove
    /// count adapts over these.
    pub burn_in: usize,
    pub prior: HyperPrior,
    pub seed: u64,
}

impl Default for GewekeConfig {
    fn default() -> Self {
        GewekeConfig {
            n_objects: 5,
            dim: 2,
            samples: 2000,
            thinning: 100,
            burn_in: 1000,
            prior: HyperPrior::default(),
            seed: 0,
        }
    }
}

impl GewekeConfig {
    /// Sampler settings used against this configuration: the default kernel
    /// without heuristics.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            prior: self.prior,
            burn_in: self.burn_in,
            ..SamplerConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.dim == 0 || self.samples == 0 || self.thinning == 0 {
            return Err(BdtError::InvalidArgument(
                "objects, dimension, samples and thinning must all be positive".into(),
            ));
        }
        Ok(())
    }
}

fn joint_draw<R: Rng + ?Sized>(config: &GewekeConfig, rng: &mut R) -> Result<(Tree, Hyperparams, Dataset)> {
    let hp = config.prior.sample(rng);
    let tree = simulate_tree(config.n_objects, &hp, rng)?;
    let (data, _) = sample_data(&tree, &hp, config.dim, rng)?;
    Ok((tree, hp, data))
}

/// Independent draws of (hyperparameters, tree, data) from the model. Each
/// draw has its own generator stream, so results do not depend on threading.
pub fn marginal_conditional_samples(config: &GewekeConfig) -> Result<Vec<StatisticVector>> {
    config.validate()?;
    (0..config.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, 1 + i as u64);
            let (tree, hp, _) = joint_draw(config, &mut rng)?;
            Ok(StatisticVector::new(&tree, &hp))
        })
        .collect()
}

/// A chain alternating one kernel step with a fresh draw of the data given
/// the current parameters.
pub fn successive_conditional_samples<K: GewekeKernel + ?Sized>(
    config: &GewekeConfig,
    kernel: &mut K,
) -> Result<Vec<StatisticVector>> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, 0);
    let (tree, hp, mut data) = joint_draw(config, &mut rng)?;
    let mut state = ChainState::new(tree, hp, &data)?;
    let mut step = |state: &mut ChainState, data: &mut Dataset, rng: &mut ChaCha8Rng| -> Result<()> {
        kernel.step(state, data, rng)?;
        *data = sample_data(&state.tree, &state.hp, config.dim, rng)?.0;
        state.refresh(data)
    };
    for _ in 0..config.burn_in {
        step(&mut state, &mut data, &mut rng)?;
    }
    let mut out = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        for _ in 0..config.thinning {
            step(&mut state, &mut data, &mut rng)?;
        }
        out.push(StatisticVector::new(&state.tree, &state.hp));
    }
    Ok(out)
}

/// End states of independent short chains, each started from its own joint
/// draw and alternating kernel steps with fresh data. A correct kernel leaves
/// every end state distributed as the joint, so unlike the successive chain
/// the draws are independent and the KS p-values are calibrated. The kernel
/// must not adapt, and `config.samples` is the number of chains.
pub fn independent_chain_samples<K, F>(
    config: &GewekeConfig,
    steps: usize,
    make_kernel: F,
) -> Result<Vec<StatisticVector>>
where
    K: GewekeKernel,
    F: Fn() -> Result<K> + Sync,
{
    config.validate()?;
    (0..config.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, INDEPENDENT_STREAMS + i as u64);
            let mut kernel = make_kernel()?;
            let (tree, hp, mut data) = joint_draw(config, &mut rng)?;
            let mut state = ChainState::new(tree, hp, &data)?;
            for _ in 0..steps {
                kernel.step(&mut state, &data, &mut rng)?;
                data = sample_data(&state.tree, &state.hp, config.dim, &mut rng)?.0;
                state.refresh(&data)?;
            }
            Ok(StatisticVector::new(&state.tree, &state.hp))
        })
        .collect()
}

const INDEPENDENT_STREAMS: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GewekeRow {
    pub statistic: &'static str,
    pub marginal_mean: f64,
    pub successive_mean: f64,
    pub ks: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GewekeReport {
    pub rows: Vec<GewekeRow>,
}

impl GewekeReport {
    pub fn count_below(&self, alpha: f64) -> usize {
        self.rows.iter().filter(|r| r.p_value < alpha).count()
    }

    pub fn min_p(&self) -> f64 {
        self.rows.iter().map(|r| r.p_value).fold(1.0, f64::min)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["statistic", "marginal_mean", "successive_mean", "ks", "p_value"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.statistic.to_string(),
                r.marginal_mean.to_string(),
                r.successive_mean.to_string(),
                r.ks.to_string(),
                r.p_value.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> BdtError {
    BdtError::Io(std::io::Error::other(e))
}

/// KS comparison of two streams, one row per statistic. Discrete statistics
/// get U(−½, ½) jitter to break ties.
pub fn compare(a: &[StatisticVector], b: &[StatisticVector], seed: u64) -> Result<GewekeReport> {
    let mut rng = stream_rng(seed, u64::MAX);
    let mut rows = Vec::with_capacity(12);
    for (i, &name) in STATISTIC_NAMES.iter().enumerate() {
        let mut col = |s: &[StatisticVector]| -> Vec<f64> {
            s.iter()
                .map(|v| v.0[i] + if DISCRETE[i] { rng.random::<f64>() - 0.5 } else { 0.0 })
                .collect()
        };
        let (xa, xb) = (col(a), col(b));
        let r = ks_two_sample(&xa, &xb)?;
        let mean = |s: &[StatisticVector]| s.iter().map(|v| v.0[i]).sum::<f64>() / s.len() as f64;
        rows.push(GewekeRow {
            statistic: name,
            marginal_mean: mean(a),
            successive_mean: mean(b),
            ks: r.statistic,
            p_value: r.p_value,
        });
    }
    Ok(GewekeReport { rows })
}

/// Runs both schemes and compares them.
pub fn run_geweke_suite<K: GewekeKernel + ?Sized>(config: &GewekeConfig, kernel: &mut K) -> Result<GewekeReport> {
    let marginal = marginal_conditional_samples(config)?;
    let successive = successive_conditional_samples(config, kernel)?;
    compare(&marginal, &successive, config.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::AddRemoveSchedule;
    use crate::tree::tests::three_object_tree;

    #[test]
    fn statistics_of_a_known_tree() {
        let t = three_object_tree(0.3, 0.5, 0.6, 0.8);
        let s = StatisticVector::new(&t, &Hyperparams::default());
        assert_eq!(&s.0[..6], &[2.0, 2.0, 2.0, 4.0, 4.0 / 6.0, 0.3]);
        assert_eq!(s.get("sigma_y"), Some(1.0));
        assert_eq!(s.get("nope"), None);
    }

    fn small() -> GewekeConfig {
        GewekeConfig {
            n_objects: 3,
            dim: 2,
            samples: 400,
            thinning: 2,
            burn_in: 0,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn one_marginal_draw() {
        let c = GewekeConfig { samples: 1, ..small() };
        assert_eq!(marginal_conditional_samples(&c).unwrap().len(), 1);
        assert!(marginal_conditional_samples(&GewekeConfig { samples: 0, ..small() }).is_err());
    }

    #[test]
    fn marginal_draws_do_not_depend_on_threads() {
        let c = small();
        let a = marginal_conditional_samples(&c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| marginal_conditional_samples(&c).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn prior_redraw_kernel_passes() {
        let c = small();
        let mut k = PriorRedraw { prior: c.prior };
        let r = run_geweke_suite(&c, &mut k).unwrap();
        assert_eq!(r.rows.len(), 12);
        assert!(r.min_p() > 0.001, "{r:?}");
    }

    #[test]
    fn independent_chains_with_a_fixed_count() {
        let c = GewekeConfig {
            samples: 300,
            ..small()
        };
        let marginal = marginal_conditional_samples(&c).unwrap();
        let sc = SamplerConfig {
            add_remove: AddRemoveSchedule::Fixed(1),
            ..c.sampler_config()
        };
        let ends = independent_chain_samples(&c, 10, || Sampler::new(sc.clone())).unwrap();
        assert_eq!(ends.len(), 300);
        let again = independent_chain_samples(&c, 10, || Sampler::new(sc.clone())).unwrap();
        assert_eq!(ends, again);
        assert!(compare(&marginal, &ends, 1).unwrap().min_p() > 0.001);
    }

    #[test]
    fn no_rates_means_one_leaf() {
        let prior = HyperPrior { rate_rate: 1e12, ..HyperPrior::default() };
        let c = GewekeConfig {
            prior,
            samples: 200,
            ..small()
        };
        assert!(marginal_conditional_samples(&c).unwrap().iter().all(|s| s.0[0] == 1.0));
    }

    #[test]
    fn csv_table() {
        let c = small();
        let mut k = PriorRedraw { prior: c.prior };
        let r = run_geweke_suite(&GewekeConfig { samples: 50, ..c }, &mut k).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 13);
        assert!(s.starts_with("statistic,"));
    }
}
