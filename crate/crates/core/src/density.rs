//! Log-densities of tree structures and of Brownian node locations.

use crate::error::{BdtError, Result};
use crate::params::Hyperparams;
use crate::special::{harmonic_unchecked, ln_beta};
use crate::tree::{NodeId, NodeKind, Tree};
use nalgebra::DVector;
use serde::Serialize;
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Locations of the non-root nodes; the root sits at the origin.
pub type NodeLocations = BTreeMap<NodeId, DVector<f64>>;

/// Combined replicate and stop hazard of a particle with `m` predecessors.
pub fn event_hazard(m: usize, hp: &Hyperparams) -> f64 {
    let m = m as f64;
    hp.theta_r * hp.lambda_r / (hp.theta_r + m) + hp.theta_s * hp.lambda_s / (hp.theta_s + m)
}

/// Probability that a particle with `m` predecessors on its branch neither
/// stops nor replicates during `[t, t_prime]`.
pub fn psi_no_event(m: usize, hp: &Hyperparams, t: f64, t_prime: f64) -> Result<f64> {
    if t_prime < t {
        return Err(BdtError::InvalidArgument(format!(
            "interval end {t_prime} precedes start {t}"
        )));
    }
    Ok((-(t_prime - t) * event_hazard(m, hp)).exp())
}

/// Sufficient statistics of a tree for its prior density.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TreeSummary {
    /// (branch length, m) per branch.
    pub branches: Vec<(f64, usize)>,
    /// (m, n_r) per replicate node.
    pub replicate: Vec<(usize, usize)>,
    /// (m, n_s) per stop node.
    pub stop: Vec<(usize, usize)>,
}

impl TreeSummary {
    pub fn new(tree: &Tree) -> Self {
        let mut s = TreeSummary::default();
        for (_, n) in tree.branch_ends() {
            let parent = tree.n(n.parent.expect("non-root has parent"));
            s.branches.push((n.time - parent.time, n.m()));
            match n.kind {
                NodeKind::Replicate => s.replicate.push((n.m(), n.acted.len())),
                NodeKind::Stop => s.stop.push((n.m(), n.acted.len())),
                _ => {}
            }
        }
        s
    }

    /// Σ over branches of length × H_m^theta.
    pub fn branch_harmonic_sum(&self, theta: f64) -> f64 {
        self.branches
            .iter()
            .map(|&(dt, m)| dt * harmonic_unchecked(theta, m))
            .sum()
    }

    fn node_terms(nodes: &[(usize, usize)], lambda: f64, theta: f64) -> f64 {
        nodes
            .iter()
            .map(|&(m, n)| {
                if n == 0 || n > m {
                    f64::NEG_INFINITY
                } else {
                    (theta * lambda).ln() + ln_beta(theta + (m - n) as f64, n as f64)
                }
            })
            .sum()
    }

    /// Terms of the log-density that involve (lambda_r, theta_r).
    pub fn replicate_part(&self, lambda_r: f64, theta_r: f64) -> f64 {
        Self::node_terms(&self.replicate, lambda_r, theta_r) - lambda_r * theta_r * self.branch_harmonic_sum(theta_r)
    }

    /// Terms of the log-density that involve (lambda_s, theta_s).
    pub fn stop_part(&self, lambda_s: f64, theta_s: f64) -> f64 {
        Self::node_terms(&self.stop, lambda_s, theta_s) - lambda_s * theta_s * self.branch_harmonic_sum(theta_s)
    }

    pub fn log_density(&self, hp: &Hyperparams) -> f64 {
        self.replicate_part(hp.lambda_r, hp.theta_r) + self.stop_part(hp.lambda_s, hp.theta_s)
    }
}

/// Decomposition of the tree log-density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DensityTerms {
    pub replicate_nodes: f64,
    pub stop_nodes: f64,
    pub branches: f64,
    pub total: f64,
}

pub fn log_tree_density_terms(tree: &Tree, hp: &Hyperparams) -> Result<DensityTerms> {
    hp.validate_tree()?;
    tree.check()?;
    let s = TreeSummary::new(tree);
    let replicate_nodes = TreeSummary::node_terms(&s.replicate, hp.lambda_r, hp.theta_r);
    let stop_nodes = TreeSummary::node_terms(&s.stop, hp.lambda_s, hp.theta_s);
    let branches = -hp.lambda_r * hp.theta_r * s.branch_harmonic_sum(hp.theta_r)
        - hp.lambda_s * hp.theta_s * s.branch_harmonic_sum(hp.theta_s);
    Ok(DensityTerms {
        replicate_nodes,
        stop_nodes,
        branches,
        total: replicate_nodes + stop_nodes + branches,
    })
}

/// Log-density of the tree structure under the prior.
pub fn log_tree_density(tree: &Tree, hp: &Hyperparams) -> Result<f64> {
    Ok(log_tree_density_terms(tree, hp)?.total)
}

/// Log-density accumulated object by object in `order`, each object's path
/// conditioned on the paths of the objects before it.
pub fn log_sequential_density(tree: &Tree, order: &[usize], hp: &Hyperparams) -> Result<f64> {
    hp.validate_tree()?;
    tree.check()?;
    let n = tree.n_objects();
    let mut rank = vec![usize::MAX; n];
    for (p, &o) in order.iter().enumerate() {
        if o >= n || rank[o] != usize::MAX {
            return Err(BdtError::InvalidArgument(format!(
                "order is not a permutation of 0..{n}"
            )));
        }
        rank[o] = p;
    }
    if order.len() != n {
        return Err(BdtError::InvalidArgument(format!(
            "order is not a permutation of 0..{n}"
        )));
    }

    let mut total = 0.0;
    for (_, node) in tree.branch_ends() {
        let t_u = tree.n(node.parent.unwrap()).time;
        let dt = node.time - t_u;
        let (theta, lambda) = match node.kind {
            NodeKind::Replicate => (hp.theta_r, hp.lambda_r),
            _ => (hp.theta_s, hp.lambda_s),
        };
        let creator_rank = node.acted.iter().map(|o| rank[o]).min();
        for o in node.members.iter() {
            let r = rank[o];
            let m_prev = node.members.iter().filter(|&x| rank[x] < r).count();
            total += -dt * event_hazard(m_prev, hp);
            if !node.is_internal() {
                continue;
            }
            let cr = creator_rank.expect("internal node has actors");
            if r == cr {
                total += (theta * lambda / (theta + m_prev as f64)).ln();
            } else if r > cr {
                let n_prev = node.acted.iter().filter(|&x| rank[x] < r).count();
                let p = n_prev as f64 / (theta + m_prev as f64);
                total += if node.acted.contains(o) { p.ln() } else { (1.0 - p).ln() };
            }
        }
    }
    Ok(total)
}

/// Sum over branches of the Brownian transition log-density.
pub fn log_location_density(tree: &Tree, locations: &NodeLocations, sigma_x: f64) -> Result<f64> {
    if !(sigma_x > 0.0) {
        return Err(BdtError::InvalidHyperparameter {
            name: "sigma_x",
            value: sigma_x,
        });
    }
    let dim = locations
        .values()
        .next()
        .map(|x| x.len())
        .ok_or_else(|| BdtError::InvalidArgument("no locations given".into()))?;
    let origin = DVector::zeros(dim);
    let mut total = 0.0;
    for (id, n) in tree.branch_ends() {
        let p = n.parent.unwrap();
        let x_v = locations
            .get(&id)
            .ok_or_else(|| BdtError::InvalidArgument(format!("missing location for node {id}")))?;
        let x_u = if p == tree.root() {
            &origin
        } else {
            locations
                .get(&p)
                .ok_or_else(|| BdtError::InvalidArgument(format!("missing location for node {p}")))?
        };
        if x_v.len() != dim || x_u.len() != dim {
            return Err(BdtError::InvalidArgument("location dimensions differ".into()));
        }
        let var = sigma_x * sigma_x * (n.time - tree.n(p).time);
        let sq = (x_v - x_u).norm_squared();
        total += -0.5 * dim as f64 * (2.0 * PI * var).ln() - sq / (2.0 * var);
    }
    Ok(total)
}
