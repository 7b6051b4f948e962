//! Forward simulation of tree structures and node locations.

use crate::density::NodeLocations;
use crate::error::{BdtError, Result};
use crate::objects::ObjectSet;
use crate::params::Hyperparams;
use crate::tree::{Node, NodeId, NodeKind, Slot, Tree};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

fn exp_time<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    let e: f64 = Exp1.sample(rng);
    if rate > 0.0 {
        e / rate
    } else {
        f64::INFINITY
    }
}

/// Waiting time to the next event for a particle with `m` predecessors and
/// whether that event is a stop.
pub(crate) fn draw_event<R: Rng + ?Sized>(m: usize, hp: &Hyperparams, rng: &mut R) -> (f64, bool) {
    let m = m as f64;
    let t_r = exp_time(hp.theta_r * hp.lambda_r / (hp.theta_r + m), rng);
    let t_s = exp_time(hp.theta_s * hp.lambda_s / (hp.theta_s + m), rng);
    if t_s <= t_r {
        (t_s, true)
    } else {
        (t_r, false)
    }
}

/// Sends `obj` from node `from` down the branch in `slot`, drawing its path
/// (and those of its replicates) from the prior given the particles already
/// there. The decision at `from` must already be recorded.
pub(crate) fn descend<R: Rng + ?Sized>(
    tree: &mut Tree,
    from: NodeId,
    slot: Slot,
    obj: usize,
    hp: &Hyperparams,
    rng: &mut R,
) {
    let mut work = vec![(from, slot)];
    while let Some((u, slot)) = work.pop() {
        let t0 = tree.n(u).time;
        match tree.n(u).child(slot) {
            None => {
                let (dt, stop) = draw_event(0, hp, rng);
                let t = t0 + dt;
                let one = ObjectSet::singleton(obj);
                if t >= 1.0 {
                    tree.attach(u, slot, Node::new(NodeKind::Leaf, 1.0, one, ObjectSet::new()));
                } else if stop {
                    tree.attach(u, slot, Node::new(NodeKind::Stop, t, one.clone(), one));
                } else {
                    let w = tree.attach(u, slot, Node::new(NodeKind::Replicate, t, one.clone(), one));
                    work.push((w, Slot::Divergent));
                    work.push((w, Slot::Original));
                }
            }
            Some(c) => {
                let m = tree.n(c).m();
                let (dt, stop) = draw_event(m, hp, rng);
                let t = t0 + dt;
                if t < tree.n(c).time {
                    let mut members = tree.n(c).members.clone();
                    members.insert(obj);
                    let one = ObjectSet::singleton(obj);
                    if stop {
                        tree.insert_above(c, Node::new(NodeKind::Stop, t, members, one));
                    } else {
                        let w = tree.insert_above(c, Node::new(NodeKind::Replicate, t, members, one));
                        work.push((w, Slot::Divergent));
                        work.push((w, Slot::Original));
                    }
                    continue;
                }
                let node = tree.n_mut(c);
                node.members.insert(obj);
                let m = m as f64;
                match node.kind {
                    NodeKind::Leaf => {}
                    NodeKind::Stop => {
                        let p = node.acted.len() as f64 / (hp.theta_s + m);
                        if rng.random::<f64>() < p {
                            node.acted.insert(obj);
                        } else {
                            work.push((c, Slot::Original));
                        }
                    }
                    NodeKind::Replicate => {
                        let p = node.acted.len() as f64 / (hp.theta_r + m);
                        if rng.random::<f64>() < p {
                            node.acted.insert(obj);
                            work.push((c, Slot::Divergent));
                        }
                        work.push((c, Slot::Original));
                    }
                    NodeKind::Root => unreachable!("root is never a child"),
                }
            }
        }
    }
}

/// Draws a tree over `n_objects` objects from the prior.
pub fn simulate_tree<R: Rng + ?Sized>(n_objects: usize, hp: &Hyperparams, rng: &mut R) -> Result<Tree> {
    if n_objects == 0 {
        return Err(BdtError::InvalidArgument("need at least one object".into()));
    }
    hp.validate_tree()?;
    let mut tree = Tree::empty(n_objects);
    let root = tree.root();
    for obj in 0..n_objects {
        descend(&mut tree, root, Slot::Original, obj, hp, rng);
    }
    Ok(tree)
}

/// Adds one object to `tree`, drawing its path from the prior conditional on
/// the existing ones.
pub fn extend_tree<R: Rng + ?Sized>(tree: &Tree, hp: &Hyperparams, rng: &mut R) -> Result<Tree> {
    hp.validate_tree()?;
    tree.check()?;
    let mut out = tree.clone();
    let obj = out.push_object();
    let root = out.root();
    descend(&mut out, root, Slot::Original, obj, hp, rng);
    Ok(out)
}

/// Draws the path of `obj` below node `from` in `slot`. For a divergent slot
/// the object is recorded as diverging at `from`.
pub fn sample_particle_path<R: Rng + ?Sized>(
    tree: &Tree,
    from: NodeId,
    slot: Slot,
    obj: usize,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<Tree> {
    hp.validate_tree()?;
    let u = tree.node(from)?;
    if obj >= tree.n_objects() || !u.members().contains(obj) {
        return Err(BdtError::InvalidArgument(format!(
            "object {obj} does not reach node {from}"
        )));
    }
    if let Some(c) = u.child(slot) {
        if tree.n(c).members().contains(obj) {
            return Err(BdtError::InvalidArgument(format!(
                "object {obj} is already present below node {from}"
            )));
        }
    }
    match (u.kind(), slot) {
        (NodeKind::Replicate, Slot::Divergent) => {}
        (NodeKind::Leaf, _) | (_, Slot::Divergent) => {
            return Err(BdtError::InvalidArgument(format!("node {from} has no such branch")))
        }
        (NodeKind::Stop, Slot::Original) if u.acted().contains(obj) => {
            return Err(BdtError::InvalidArgument(format!(
                "object {obj} stopped at node {from}"
            )))
        }
        _ => {}
    }
    let mut out = tree.clone();
    if slot == Slot::Divergent {
        out.n_mut(from).acted.insert(obj);
    }
    descend(&mut out, from, slot, obj, hp, rng);
    Ok(out)
}

/// Brownian locations for every non-root node; the root is at the origin.
pub fn sample_locations<R: Rng + ?Sized>(tree: &Tree, sigma_x: f64, dim: usize, rng: &mut R) -> Result<NodeLocations> {
    if dim == 0 {
        return Err(BdtError::InvalidArgument("dimension must be at least 1".into()));
    }
    if !(sigma_x >= 0.0 && sigma_x.is_finite()) {
        return Err(BdtError::InvalidHyperparameter {
            name: "sigma_x",
            value: sigma_x,
        });
    }
    let mut locs = NodeLocations::new();
    let origin = DVector::zeros(dim);
    for id in tree.preorder() {
        let n = tree.n(id);
        let Some(p) = n.parent else { continue };
        let base = locs.get(&p).unwrap_or(&origin);
        let sd = sigma_x * (n.time - tree.n(p).time).sqrt();
        let x = base + DVector::from_fn(dim, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        locs.insert(id, x);
    }
    Ok(locs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::psi_no_event;
    use crate::tree::TreeBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simulated_trees_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..2000 {
            let n = 1 + i % 12;
            let hp = Hyperparams::tree(0.5 + (i % 3) as f64, 0.5 + (i % 4) as f64, 0.3 + (i % 5) as f64, 1.5);
            let t = simulate_tree(n, &hp, &mut rng).unwrap();
            assert!(t.validate().is_empty(), "{:?}", t.validate());
            let z = t.feature_matrix();
            for k in 0..z.n_features() {
                assert!(z.z.column(k).sum() > 0.0);
            }
        }
    }

    #[test]
    fn tiny_rates_give_single_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hp = Hyperparams::tree(1e-300, 1e-300, 1.0, 1.0);
        let t = simulate_tree(7, &hp, &mut rng).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.leaves().len(), 1);
        assert_eq!(t.n(t.leaves()[0]).m(), 7);
        assert!(simulate_tree(0, &hp, &mut rng).is_err());
    }

    #[test]
    fn bare_branch_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hp = Hyperparams::tree(0.7, 0.4, 1.0, 1.0);
        let reps = 100_000;
        let hits = (0..reps)
            .filter(|_| {
                let t = simulate_tree(1, &hp, &mut rng).unwrap();
                t.len() == 2 && t.leaves().len() == 1
            })
            .count();
        let p = psi_no_event(0, &hp, 0.0, 1.0).unwrap();
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        assert!((hits as f64 / reps as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn extend_keeps_existing_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hp = Hyperparams::default();
        for _ in 0..200 {
            let t = simulate_tree(4, &hp, &mut rng).unwrap();
            let e = extend_tree(&t, &hp, &mut rng).unwrap();
            assert!(e.validate().is_empty());
            assert_eq!(e.n_objects(), 5);
            for (id, n) in t.iter() {
                assert_eq!(e.n(id).time(), n.time());
            }
        }
    }

    #[test]
    fn divergence_probability_at_replicate_node() {
        // one other particle diverged at a replicate node: new particle follows
        // it with probability 1/(theta_r + 1)
        let mut b = TreeBuilder::new(2);
        let r = b.root();
        let a = b.add(r, Slot::Original, NodeKind::Replicate, 1e-12, &[0, 1], &[0]);
        b.add(a, Slot::Original, NodeKind::Leaf, 1.0, &[0, 1], &[]);
        b.add(a, Slot::Divergent, NodeKind::Leaf, 1.0, &[0], &[]);
        let t = b.build().unwrap();
        let hp = Hyperparams::tree(1e-300, 1e-300, 1.0, 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = 40_000;
        let mut hits = 0;
        for _ in 0..reps {
            let mut x = t.restrict_to_objects(&[0]).unwrap();
            let obj = x.push_object();
            let root = x.root();
            descend(&mut x, root, Slot::Original, obj, &hp, &mut rng);
            if x.n(a).acted().contains(obj) {
                hits += 1;
            }
        }
        let p = 1.0 / 3.5;
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        assert!((hits as f64 / reps as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn path_sampling_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hp = Hyperparams::default();
        let t = crate::tree::tests::three_object_tree(0.2, 0.4, 0.5, 0.7);
        let root = t.root();
        assert!(sample_particle_path(&t, root, Slot::Original, 0, &hp, &mut rng).is_err());
        let leaf = t.leaves()[0];
        assert!(sample_particle_path(&t, leaf, Slot::Original, 0, &hp, &mut rng).is_err());
        // object 0 did not diverge at a; send it down the divergent branch
        let a = t.n(root).original_child().unwrap();
        let x = sample_particle_path(&t, a, Slot::Divergent, 0, &hp, &mut rng).unwrap();
        assert!(x.validate().is_empty());
        assert!(x.n(a).acted().contains(0));
    }

    #[test]
    fn locations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = crate::tree::tests::three_object_tree(0.2, 0.4, 0.5, 0.7);
        let l = sample_locations(&t, 0.0, 3, &mut rng).unwrap();
        assert!(l.values().all(|x| x.iter().all(|&v| v == 0.0)));
        assert_eq!(l.len(), t.len() - 1);
        assert!(sample_locations(&t, 1.0, 0, &mut rng).is_err());
    }
}
