//! Metropolis-Hastings sampling of tree structures and hyperparameters.

mod moves;

use crate::density::TreeSummary;
use crate::error::{BdtError, Result};
use crate::factor::{log_marginal_likelihood, Dataset};
use crate::params::{HyperPrior, Hyperparams};
use crate::prior::simulate_tree;
use crate::slice::slice_sample;
use crate::tree::{NodeId, NodeKind, Tree};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

/// Observation model conditioned on by the sampler.
pub trait Likelihood: Sync {
    fn log_likelihood(&self, tree: &Tree, hp: &Hyperparams) -> Result<f64>;
}

impl Likelihood for Dataset {
    fn log_likelihood(&self, tree: &Tree, hp: &Hyperparams) -> Result<f64> {
        log_marginal_likelihood(self, tree, hp)
    }
}

/// Constant likelihood: the sampler then targets the prior.
#[derive(Clone, Copy, Debug, Default)]
pub struct FlatLikelihood;

impl Likelihood for FlatLikelihood {
    fn log_likelihood(&self, _: &Tree, _: &Hyperparams) -> Result<f64> {
        Ok(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeuristicMode {
    Off,
    /// Only during burn-in.
    BurnIn,
    Always,
}

/// How many add/remove proposals of each kind an iteration makes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AddRemoveSchedule {
    /// ⌈I/4⌉, with I the internal node count when the iteration starts.
    /// The count depends on the state, which biases the chain towards
    /// smaller trees.
    QuarterInternal,
    /// ⌈I/4⌉ (at least one) tracking the average I during burn-in, then
    /// held fixed.
    Adaptive,
    Fixed(usize),
}

/// Deliberate departures from the correct kernel, used to check that the
/// joint-distribution tests have power.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    AlwaysAccept,
    /// Subtree moves ignore the Σm normalizers.
    DropSubtreeNormalizer,
    /// Add/remove moves ignore the density of the proposed event time.
    DropTimeProposalDensity,
    /// Flip moves count the flipped particle among the others.
    OffByOneBetaArgument,
    /// Acceptance ratios and rate posteriors exactly as commonly displayed
    /// for this sampler: selection-count ratios only, no decision or time
    /// terms, and rate posteriors without the concentration factor.
    DisplayedFormulas,
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub heuristic_period: usize,
    pub heuristics: HeuristicMode,
    /// Largest number of particles moved together; `None` means ⌈N/10⌉.
    pub multiple_cap: Option<usize>,
    pub seed: u64,
    pub prior: HyperPrior,
    pub add_remove: AddRemoveSchedule,
    pub update_rates: bool,
    pub update_concentrations: bool,
    pub update_noise: bool,
    pub mutation: Option<Mutation>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 1000,
            burn_in: 0,
            thinning: 1,
            heuristic_period: 5,
            heuristics: HeuristicMode::Off,
            multiple_cap: None,
            seed: 0,
            prior: HyperPrior::default(),
            add_remove: AddRemoveSchedule::Adaptive,
            update_rates: true,
            update_concentrations: true,
            update_noise: true,
            mutation: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(BdtError::InvalidArgument(s.into()));
        if self.thinning == 0 {
            return bad("thinning must be at least 1");
        }
        if self.heuristic_period == 0 {
            return bad("heuristic period must be at least 1");
        }
        if self.multiple_cap == Some(0) {
            return bad("multiple-subtree cap must be at least 1");
        }
        let p = &self.prior;
        for (name, v) in [
            ("rate_shape", p.rate_shape),
            ("rate_rate", p.rate_rate),
            ("concentration_shape", p.concentration_shape),
            ("concentration_rate", p.concentration_rate),
            ("precision_shape", p.precision_shape),
            ("precision_rate", p.precision_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(BdtError::InvalidHyperparameter { name, value: v });
            }
        }
        Ok(())
    }

    fn has(&self, m: Mutation) -> bool {
        self.mutation == Some(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub tree: Tree,
    pub hp: Hyperparams,
    pub log_lik: f64,
    pub iteration: usize,
}

impl ChainState {
    pub fn new<L: Likelihood + ?Sized>(tree: Tree, hp: Hyperparams, lik: &L) -> Result<Self> {
        hp.validate()?;
        tree.check()?;
        let log_lik = lik.log_likelihood(&tree, &hp)?;
        Ok(ChainState {
            tree,
            hp,
            log_lik,
            iteration: 0,
        })
    }

    /// Hyperparameters from `prior` and a tree drawn given them.
    pub fn from_prior<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        n_objects: usize,
        prior: &HyperPrior,
        lik: &L,
        rng: &mut R,
    ) -> Result<Self> {
        let hp = prior.sample(rng);
        let tree = simulate_tree(n_objects, &hp, rng)?;
        Self::new(tree, hp, lik)
    }

    /// Recomputes the cached likelihood, e.g. after the data changed.
    pub fn refresh<L: Likelihood + ?Sized>(&mut self, lik: &L) -> Result<()> {
        self.log_lik = lik.log_likelihood(&self.tree, &self.hp)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoveKind {
    Subtree,
    MultipleSubtree,
    Flip,
    AddReplicate,
    RemoveReplicate,
    AddStop,
    RemoveStop,
    Prune,
    Thicken,
}

impl MoveKind {
    pub const ALL: [MoveKind; 9] = [
        MoveKind::Subtree,
        MoveKind::MultipleSubtree,
        MoveKind::Flip,
        MoveKind::AddReplicate,
        MoveKind::RemoveReplicate,
        MoveKind::AddStop,
        MoveKind::RemoveStop,
        MoveKind::Prune,
        MoveKind::Thicken,
    ];
}

/// Proposal and acceptance counts per move.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MoveStats {
    proposed: [u64; 9],
    accepted: [u64; 9],
}

impl MoveStats {
    fn record(&mut self, kind: MoveKind, accepted: bool) {
        self.proposed[kind as usize] += 1;
        self.accepted[kind as usize] += accepted as u64;
    }

    pub fn proposed(&self, kind: MoveKind) -> u64 {
        self.proposed[kind as usize]
    }

    pub fn accepted(&self, kind: MoveKind) -> u64 {
        self.accepted[kind as usize]
    }

    pub fn rate(&self, kind: MoveKind) -> f64 {
        self.accepted(kind) as f64 / self.proposed(kind).max(1) as f64
    }
}

fn ln_sum_m(tree: &Tree) -> f64 {
    (tree.sum_m() as f64).ln()
}

fn ln_sum_m_internal(tree: &Tree) -> f64 {
    (tree.sum_m_internal() as f64).ln()
}

fn kind_nodes(tree: &Tree, kind: NodeKind) -> Vec<(NodeId, usize)> {
    tree.nodes_of_kind(kind)
        .into_iter()
        .map(|v| (v, tree.n(v).m()))
        .collect()
}

/// Log-probability that the remove move selects `v` among the nodes of its kind.
fn ln_remove_prob(tree: &Tree, v: NodeId) -> f64 {
    let kind = tree.n(v).kind;
    let z: f64 = kind_nodes(tree, kind).iter().map(|&(_, m)| 1.0 / m as f64).sum();
    -(tree.n(v).m() as f64).ln() - z.ln()
}

/// Σ m over nodes of `kind`, optionally leaving one out.
fn sum_m_kind(tree: &Tree, kind: NodeKind, skip: Option<NodeId>) -> f64 {
    kind_nodes(tree, kind)
        .iter()
        .filter(|&&(v, _)| Some(v) != skip)
        .map(|&(_, m)| m as f64)
        .sum()
}

/// The transition kernel. Holds the configuration and acceptance counts; the
/// likelihood is passed per call so the data may change between calls.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub config: SamplerConfig,
    pub stats: MoveStats,
    /// Sum of internal node counts over burn-in and the number of terms.
    internal_seen: (usize, usize),
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sampler {
            config,
            stats: MoveStats::default(),
            internal_seen: (0, 0),
        })
    }

    fn accept<R: Rng + ?Sized>(&self, log_a: f64, rng: &mut R) -> bool {
        let u: f64 = rng.random();
        if self.config.has(Mutation::AlwaysAccept) {
            return true;
        }
        u.ln() < log_a
    }

    /// Evaluates `candidate` and replaces the current tree if accepted.
    /// `log_q` holds every term of the log acceptance ratio except the
    /// likelihood ratio.
    fn try_tree<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        kind: MoveKind,
        state: &mut ChainState,
        candidate: Tree,
        log_q: f64,
        lik: &L,
        rng: &mut R,
    ) -> Result<bool> {
        debug_assert!(candidate.validate().is_empty(), "{:?}", candidate.validate());
        let ll = lik.log_likelihood(&candidate, &state.hp)?;
        let ok = self.accept(ll - state.log_lik + log_q, rng);
        if ok {
            state.tree = candidate;
            state.log_lik = ll;
        }
        self.stats.record(kind, ok);
        Ok(ok)
    }

    fn multiple_cap(&self, n: usize) -> usize {
        self.config.multiple_cap.unwrap_or(n.div_ceil(10))
    }

    /// Moves one particle, or a subset of those through a node when
    /// `multiple`, to freshly drawn paths below the node's parent.
    pub fn resample_subtree<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        multiple: bool,
        lik: &L,
        rng: &mut R,
    ) -> Result<bool> {
        let tree = &state.tree;
        let nodes: Vec<(NodeId, f64)> = tree.branch_ends().map(|(v, n)| (v, n.m() as f64)).collect();
        let w: Vec<f64> = nodes.iter().map(|x| x.1).collect();
        let Some(i) = moves::pick(&w, rng) else {
            return Ok(false);
        };
        let v = nodes[i].0;
        let members: Vec<usize> = tree.n(v).members.iter().collect();
        let k = if multiple {
            let kmax = self.multiple_cap(tree.n_objects()).min(members.len());
            rng.random_range(1..=kmax)
        } else {
            1
        };
        let objs: Vec<usize> = index::sample(rng, members.len(), k)
            .into_iter()
            .map(|j| members[j])
            .collect();
        let candidate = moves::regrow(tree, v, &objs, &state.hp, rng);
        let log_q = if self.config.has(Mutation::DropSubtreeNormalizer) {
            0.0
        } else {
            ln_sum_m(tree) - ln_sum_m(&candidate)
        };
        let kind = if multiple {
            MoveKind::MultipleSubtree
        } else {
            MoveKind::Subtree
        };
        self.try_tree(kind, state, candidate, log_q, lik, rng)
    }

    /// Toggles one particle's decision at a replicate or stop node.
    pub fn flip_decision<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        lik: &L,
        rng: &mut R,
    ) -> Result<bool> {
        let tree = &state.tree;
        let nodes: Vec<(NodeId, f64)> = tree
            .branch_ends()
            .filter(|(_, n)| n.is_internal())
            .map(|(v, n)| (v, n.m() as f64))
            .collect();
        let w: Vec<f64> = nodes.iter().map(|x| x.1).collect();
        let Some(i) = moves::pick(&w, rng) else {
            return Ok(false);
        };
        let v = nodes[i].0;
        let members: Vec<usize> = tree.n(v).members.iter().collect();
        let obj = members[rng.random_range(0..members.len())];
        let others = members.len() as f64
            - if self.config.has(Mutation::OffByOneBetaArgument) {
                0.0
            } else {
                1.0
            };
        let Some((candidate, ln_prior)) = moves::flip(tree, v, obj, others, &state.hp, rng) else {
            self.stats.record(MoveKind::Flip, false);
            return Ok(false);
        };
        let ln_prior = if self.config.has(Mutation::DisplayedFormulas) {
            0.0
        } else {
            ln_prior
        };
        let log_q = ln_prior + ln_sum_m_internal(tree) - ln_sum_m_internal(&candidate);
        self.try_tree(MoveKind::Flip, state, candidate, log_q, lik, rng)
    }

    /// Proposes adding or removing a node of `kind` with equal probability.
    pub fn add_or_remove<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        kind: NodeKind,
        lik: &L,
        rng: &mut R,
    ) -> Result<bool> {
        if rng.random::<bool>() {
            self.add_node(state, kind, lik, rng)
        } else {
            self.remove_node(state, kind, lik, rng)
        }
    }

    fn rate_of(hp: &Hyperparams, kind: NodeKind) -> f64 {
        if kind == NodeKind::Replicate {
            hp.lambda_r
        } else {
            hp.lambda_s
        }
    }

    pub fn add_node<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        kind: NodeKind,
        lik: &L,
        rng: &mut R,
    ) -> Result<bool> {
        let mk = if kind == NodeKind::Replicate {
            MoveKind::AddReplicate
        } else {
            MoveKind::AddStop
        };
        let tree = &state.tree;
        let nodes: Vec<(NodeId, f64)> = tree.branch_ends().map(|(v, n)| (v, n.m() as f64)).collect();
        let w: Vec<f64> = nodes.iter().map(|x| x.1).collect();
        let Some(i) = moves::pick(&w, rng) else {
            return Ok(false);
        };
        let f = nodes[i].0;
        let t_e = tree.n(tree.n(f).parent.expect("non-root")).time;
        let width = tree.n(f).time - t_e;
        let lambda = Self::rate_of(&state.hp, kind);
        let x = moves::truncated_exp(lambda, width, rng.random());
        let t_star = t_e + x;
        if !(t_star > t_e && t_star < tree.n(f).time) {
            self.stats.record(mk, false);
            return Ok(false);
        }
        let (candidate, v) = moves::add_node(tree, f, kind, t_star, &state.hp, rng);
        let log_q = if self.config.has(Mutation::DisplayedFormulas) {
            (sum_m_kind(&candidate, kind, Some(v)) / sum_m_kind(&candidate, kind, None)).ln()
                - (tree.n(f).m() as f64).ln()
                + ln_sum_m(tree)
        } else {
            let n = candidate.n(v).acted.len() as f64;
            let time = if self.config.has(Mutation::DropTimeProposalDensity) {
                0.0
            } else {
                moves::log_truncated_exp(lambda, x, width)
            };
            ln_remove_prob(&candidate, v) + ln_sum_m(tree) - n.ln() - time
        };
        self.try_tree(mk, state, candidate, log_q, lik, rng)
    }

    pub fn remove_node<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        kind: NodeKind,
        lik: &L,
        rng: &mut R,
    ) -> Result<bool> {
        let mk = if kind == NodeKind::Replicate {
            MoveKind::RemoveReplicate
        } else {
            MoveKind::RemoveStop
        };
        let tree = &state.tree;
        let nodes = kind_nodes(tree, kind);
        let w: Vec<f64> = nodes.iter().map(|&(_, m)| 1.0 / m as f64).collect();
        let Some(i) = moves::pick(&w, rng) else {
            self.stats.record(mk, false);
            return Ok(false);
        };
        let v = nodes[i].0;
        let (e, slot) = tree.slot_of(v).expect("internal node has a parent");
        let t_e = tree.n(e).time;
        let t_star = tree.n(v).time;
        let n = tree.n(v).acted.len() as f64;
        let candidate = moves::remove_node(tree, v, &state.hp, rng);
        let log_q = if self.config.has(Mutation::DisplayedFormulas) {
            (tree.n(v).m() as f64).ln()
                - ln_sum_m(&candidate)
                - (sum_m_kind(tree, kind, Some(v)) / sum_m_kind(tree, kind, None)).ln()
        } else {
            let c = candidate.n(e).child(slot).expect("branch survives the removal");
            let lambda = Self::rate_of(&state.hp, kind);
            let time = if self.config.has(Mutation::DropTimeProposalDensity) {
                0.0
            } else {
                moves::log_truncated_exp(lambda, t_star - t_e, candidate.n(c).time - t_e)
            };
            n.ln() + time - ln_remove_prob(tree, v) - ln_sum_m(&candidate)
        };
        self.try_tree(mk, state, candidate, log_q, lik, rng)
    }

    /// Removes a thinly used divergent branch, scored by prior times
    /// likelihood only.
    pub fn prune<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        lik: &L,
        rng: &mut R,
    ) -> Result<bool> {
        let tree = &state.tree;
        let nodes = tree.nodes_of_kind(NodeKind::Replicate);
        let w: Vec<f64> = nodes
            .iter()
            .map(|&v| tree.n(v).m() as f64 / tree.n(v).acted.len() as f64)
            .collect();
        let Some(i) = moves::pick(&w, rng) else {
            return Ok(false);
        };
        let candidate = moves::remove_node(tree, nodes[i], &state.hp, rng);
        let log_q = TreeSummary::new(&candidate).log_density(&state.hp) - TreeSummary::new(tree).log_density(&state.hp);
        self.try_tree(MoveKind::Prune, state, candidate, log_q, lik, rng)
    }

    /// Removes a rarely used stop node, scored by prior times likelihood only.
    pub fn thicken<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        lik: &L,
        rng: &mut R,
    ) -> Result<bool> {
        let tree = &state.tree;
        let nodes = tree.nodes_of_kind(NodeKind::Stop);
        let w: Vec<f64> = nodes.iter().map(|&v| 1.0 / tree.n(v).acted.len() as f64).collect();
        let Some(i) = moves::pick(&w, rng) else {
            return Ok(false);
        };
        let candidate = moves::remove_node(tree, nodes[i], &state.hp, rng);
        let log_q = TreeSummary::new(&candidate).log_density(&state.hp) - TreeSummary::new(tree).log_density(&state.hp);
        self.try_tree(MoveKind::Thicken, state, candidate, log_q, lik, rng)
    }

    /// Gibbs update of both rates from their gamma full conditionals.
    pub fn resample_rates<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R) {
        let s = TreeSummary::new(&state.tree);
        let p = &self.config.prior;
        let verbatim = self.config.has(Mutation::DisplayedFormulas);
        let mut draw = |count: usize, theta: f64| {
            let scale = if verbatim { 1.0 } else { theta };
            let rate = p.rate_rate + scale * s.branch_harmonic_sum(theta);
            Gamma::new(p.rate_shape + count as f64, 1.0 / rate)
                .expect("positive gamma parameters")
                .sample(rng)
        };
        state.hp.lambda_s = draw(s.stop.len(), state.hp.theta_s);
        state.hp.lambda_r = draw(s.replicate.len(), state.hp.theta_r);
    }

    /// Slice updates of both concentrations on the log scale.
    pub fn slice_concentrations<R: Rng + ?Sized>(&mut self, state: &mut ChainState, rng: &mut R) -> Result<()> {
        let s = TreeSummary::new(&state.tree);
        let (a, b) = (
            self.config.prior.concentration_shape,
            self.config.prior.concentration_rate,
        );
        let finite = |x: f64| if x.is_nan() { f64::NEG_INFINITY } else { x };
        let ls = state.hp.lambda_s;
        let fs = |u: f64| Ok(finite(a * u - b * u.exp() + s.stop_part(ls, u.exp())));
        let u0 = state.hp.theta_s.ln();
        let (u, _) = slice_sample("theta_s", u0, fs(u0)?, 1.0, SLICE_STEPS, fs, rng)?;
        state.hp.theta_s = u.exp();
        let lr = state.hp.lambda_r;
        let fr = |u: f64| Ok(finite(a * u - b * u.exp() + s.replicate_part(lr, u.exp())));
        let u0 = state.hp.theta_r.ln();
        let (u, _) = slice_sample("theta_r", u0, fr(u0)?, 1.0, SLICE_STEPS, fr, rng)?;
        state.hp.theta_r = u.exp();
        Ok(())
    }

    /// Slice updates of both noise scales on the log scale, with gamma priors
    /// on the precisions.
    pub fn slice_noise<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        lik: &L,
        rng: &mut R,
    ) -> Result<()> {
        let (a, b) = (self.config.prior.precision_shape, self.config.prior.precision_rate);
        for which in [0, 1] {
            let base = state.hp;
            let set = |u: f64| {
                let mut h = base;
                if which == 0 {
                    h.sigma_x = u.exp();
                } else {
                    h.sigma_y = u.exp();
                }
                h
            };
            let target = |u: f64| -> Result<f64> {
                let h = set(u);
                if !(h.sigma_x > 0.0 && h.sigma_y > 0.0 && h.sigma_x.is_finite() && h.sigma_y.is_finite()) {
                    return Ok(f64::NEG_INFINITY);
                }
                let ll = match lik.log_likelihood(&state.tree, &h) {
                    Ok(v) => v,
                    Err(BdtError::SingularCovariance { .. }) => f64::NEG_INFINITY,
                    Err(e) => return Err(e),
                };
                let lp = -2.0 * a * u - b * (-2.0 * u).exp();
                Ok(if (lp + ll).is_nan() { f64::NEG_INFINITY } else { lp + ll })
            };
            let u0 = if which == 0 {
                base.sigma_x.ln()
            } else {
                base.sigma_y.ln()
            };
            let f0 = target(u0)?;
            if f0 == f64::NEG_INFINITY {
                // unreachable unless moves skip the acceptance test
                continue;
            }
            let name = if which == 0 { "sigma_x" } else { "sigma_y" };
            let (u, f) = slice_sample(name, u0, f0, 1.0, SLICE_STEPS, target, rng)?;
            state.hp = set(u);
            state.log_lik = f - (-2.0 * a * u - b * (-2.0 * u).exp());
        }
        Ok(())
    }

    /// One full sweep over all moves.
    pub fn iterate<L: Likelihood + ?Sized, R: Rng + ?Sized>(
        &mut self,
        state: &mut ChainState,
        lik: &L,
        rng: &mut R,
    ) -> Result<()> {
        let n = state.tree.n_objects();
        let internal = state.tree.internal_count();
        for _ in 0..2 * n {
            self.resample_subtree(state, false, lik, rng)?;
        }
        for _ in 0..n {
            self.resample_subtree(state, true, lik, rng)?;
        }
        for _ in 0..n {
            self.flip_decision(state, lik, rng)?;
        }
        let heuristic = match self.config.heuristics {
            HeuristicMode::Off => false,
            HeuristicMode::BurnIn => state.iteration < self.config.burn_in,
            HeuristicMode::Always => true,
        } && (state.iteration + 1).is_multiple_of(self.config.heuristic_period);
        let count = match self.config.add_remove {
            AddRemoveSchedule::QuarterInternal => internal.div_ceil(4),
            AddRemoveSchedule::Fixed(c) => c,
            AddRemoveSchedule::Adaptive => {
                if state.iteration < self.config.burn_in || self.internal_seen.1 == 0 {
                    self.internal_seen.0 += internal;
                    self.internal_seen.1 += 1;
                }
                let (sum, k) = self.internal_seen;
                (sum as f64 / k as f64 / 4.0).ceil().max(1.0) as usize
            }
        };
        if heuristic {
            for _ in 0..count.max(1) {
                self.prune(state, lik, rng)?;
                self.thicken(state, lik, rng)?;
            }
        } else {
            for kind in [NodeKind::Replicate, NodeKind::Stop] {
                for _ in 0..2 * count {
                    self.add_or_remove(state, kind, lik, rng)?;
                }
            }
        }
        if self.config.update_rates {
            self.resample_rates(state, rng);
        }
        if self.config.update_concentrations {
            self.slice_concentrations(state, rng)?;
        }
        if self.config.update_noise {
            self.slice_noise(state, lik, rng)?;
        }
        state.iteration += 1;
        #[cfg(debug_assertions)]
        if let Ok(fresh) = lik.log_likelihood(&state.tree, &state.hp) {
            debug_assert!(
                (fresh - state.log_lik).abs() <= 1e-10 * (1.0 + fresh.abs()),
                "cached likelihood drifted: {} vs {fresh}",
                state.log_lik
            );
        }
        Ok(())
    }
}

const SLICE_STEPS: usize = 50;

/// Independent generator for chain or replicate `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Iterator over thinned post-burn-in states of one chain.
pub struct ChainRun<'a, L: Likelihood + ?Sized> {
    lik: &'a L,
    sampler: Sampler,
    state: ChainState,
    rng: ChaCha8Rng,
    failed: bool,
}

impl<'a, L: Likelihood + ?Sized> ChainRun<'a, L> {
    pub fn from_state(lik: &'a L, config: SamplerConfig, state: ChainState, rng: ChaCha8Rng) -> Result<Self> {
        Ok(ChainRun {
            lik,
            sampler: Sampler::new(config)?,
            state,
            rng,
            failed: false,
        })
    }

    pub fn stats(&self) -> &MoveStats {
        &self.sampler.stats
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }
}

impl<L: Likelihood + ?Sized> Iterator for ChainRun<'_, L> {
    type Item = Result<ChainState>;

    fn next(&mut self) -> Option<Self::Item> {
        let c = &self.sampler.config;
        let (total, burn, thin) = (c.iterations, c.burn_in, c.thinning);
        while !self.failed && self.state.iteration < total {
            if let Err(e) = self.sampler.iterate(&mut self.state, self.lik, &mut self.rng) {
                self.failed = true;
                return Some(Err(e));
            }
            let it = self.state.iteration;
            if it > burn && (it - burn).is_multiple_of(thin) {
                return Some(Ok(self.state.clone()));
            }
        }
        None
    }
}

/// Runs a chain over `n_objects` objects started from a prior draw. The
/// iteration count includes burn-in.
pub fn run_chain<L: Likelihood + ?Sized>(lik: &L, n_objects: usize, config: SamplerConfig) -> Result<ChainRun<'_, L>> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, 0);
    let state = ChainState::from_prior(n_objects, &config.prior, lik, &mut rng)?;
    ChainRun::from_state(lik, config, state, rng)
}
