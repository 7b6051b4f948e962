//! Tree proposals. Each function builds a candidate tree from the current
//! one; the acceptance step lives in the sampler.

use crate::objects::ObjectSet;
use crate::params::Hyperparams;
use crate::prior::descend;
use crate::tree::{Node, NodeId, NodeKind, Slot, Tree};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

/// Index drawn proportionally to `weights`. `None` when nothing has weight.
pub(crate) fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    WeightedIndex::new(weights).ok().map(|w| w.sample(rng))
}

/// Removes `objs` from the subtree at `v` and redraws their paths from the
/// branch above it.
pub(crate) fn regrow<R: Rng + ?Sized>(tree: &Tree, v: NodeId, objs: &[usize], hp: &Hyperparams, rng: &mut R) -> Tree {
    let (u, slot) = tree.slot_of(v).expect("regrown node is not the root");
    let mut t = tree.clone();
    for &o in objs {
        t.remove_object_below(v, o);
    }
    t.cleanup();
    for &o in objs {
        descend(&mut t, u, slot, o, hp, rng);
    }
    t
}

/// Toggles the decision of `obj` at internal node `v`. Returns the candidate
/// and the log ratio of the decision terms of the prior, or `None` when the
/// flip would leave `v` with nobody acting.
///
/// `others` is the number of particles at `v` besides `obj`.
pub(crate) fn flip<R: Rng + ?Sized>(
    tree: &Tree,
    v: NodeId,
    obj: usize,
    others: f64,
    hp: &Hyperparams,
    rng: &mut R,
) -> Option<(Tree, f64)> {
    let node = tree.n(v);
    let theta = match node.kind {
        NodeKind::Replicate => hp.theta_r,
        NodeKind::Stop => hp.theta_s,
        _ => return None,
    };
    let n = node.acted.len() as f64;
    let mut t = tree.clone();
    if node.acted.contains(obj) {
        if node.acted.len() == 1 {
            return None;
        }
        let n1 = n - 1.0;
        t.n_mut(v).acted.remove(obj);
        match node.kind {
            NodeKind::Replicate => {
                let d = node.divergent.expect("replicate node has a divergent child");
                t.remove_object_below(d, obj);
                t.cleanup();
            }
            _ => descend(&mut t, v, Slot::Original, obj, hp, rng),
        }
        Some((t, ((theta + others - n1) / n1).ln()))
    } else {
        t.n_mut(v).acted.insert(obj);
        match node.kind {
            NodeKind::Replicate => descend(&mut t, v, Slot::Divergent, obj, hp, rng),
            _ => {
                let c = node.original.expect("a continuing particle has a child");
                t.remove_object_below(c, obj);
                t.cleanup();
            }
        }
        Some((t, (n / (theta + others - n)).ln()))
    }
}

/// Inserts a node of `kind` at time `t_star` on the branch ending at `f`.
/// A uniformly chosen particle creates it and the others join in turn.
pub(crate) fn add_node<R: Rng + ?Sized>(
    tree: &Tree,
    f: NodeId,
    kind: NodeKind,
    t_star: f64,
    hp: &Hyperparams,
    rng: &mut R,
) -> (Tree, NodeId) {
    let members = tree.n(f).members.clone();
    let ids: Vec<usize> = members.iter().collect();
    let creator = ids[rng.random_range(0..ids.len())];
    let theta = if kind == NodeKind::Replicate {
        hp.theta_r
    } else {
        hp.theta_s
    };
    let mut actors = vec![creator];
    for (j, &o) in ids.iter().filter(|&&o| o != creator).enumerate() {
        let p = actors.len() as f64 / (theta + (j + 1) as f64);
        if rng.random::<f64>() < p {
            actors.push(o);
        }
    }
    let acted: ObjectSet = actors.iter().copied().collect();
    let mut t = tree.clone();
    let v = t.insert_above(f, Node::new(kind, t_star, members, acted));
    match kind {
        NodeKind::Replicate => {
            for &o in &actors {
                descend(&mut t, v, Slot::Divergent, o, hp, rng);
            }
        }
        _ => {
            for &o in &actors {
                t.remove_object_below(f, o);
            }
            t.cleanup();
        }
    }
    (t, v)
}

/// Removes internal node `v`. Divergent subtrees are dropped; particles that
/// stopped at `v` get fresh paths below it.
pub(crate) fn remove_node<R: Rng + ?Sized>(tree: &Tree, v: NodeId, hp: &Hyperparams, rng: &mut R) -> Tree {
    let mut t = tree.clone();
    let node = t.n(v);
    let kind = node.kind;
    let actors: Vec<usize> = node.acted.iter().collect();
    let divergent = node.divergent;
    t.n_mut(v).acted = ObjectSet::new();
    match kind {
        NodeKind::Replicate => {
            if let Some(d) = divergent {
                t.delete_subtree(d);
            }
        }
        _ => {
            for o in actors {
                descend(&mut t, v, Slot::Original, o, hp, rng);
            }
        }
    }
    t.cleanup();
    t
}

/// Offset in `(0, width)` from an exponential with rate `lambda` truncated to
/// that interval, by inversion.
pub(crate) fn truncated_exp(lambda: f64, width: f64, u: f64) -> f64 {
    let lw = lambda * width;
    if lw < 1.0 {
        -(u * (-lw).exp_m1()).ln_1p() / lambda
    } else {
        -((1.0 - u) + u * (-lw).exp()).ln() / lambda
    }
}

/// Log of the truncated exponential density at `x`, divided by `lambda`.
pub(crate) fn log_truncated_exp(lambda: f64, x: f64, width: f64) -> f64 {
    -lambda * x - (-(-lambda * width).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::tests::three_object_tree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp() -> Hyperparams {
        Hyperparams::tree(1.3, 0.9, 0.7, 1.6)
    }

    #[test]
    fn flip_on_then_off_is_identity() {
        let t = three_object_tree(0.2, 0.5, 0.4, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = t.nodes_of_kind(NodeKind::Replicate)[1];
        // object 1 reaches c without diverging there
        assert!(t.n(c).members.contains(1) && !t.n(c).acted.contains(1));
        let (on, r_on) = flip(&t, c, 1, 1.0, &hp(), &mut rng).unwrap();
        assert!(on.validate().is_empty());
        let (off, r_off) = flip(&on, c, 1, 1.0, &hp(), &mut rng).unwrap();
        assert_eq!(off, t);
        assert!((r_on + r_off).abs() < 1e-14);
    }

    #[test]
    fn flip_refuses_to_empty_a_node() {
        let t = three_object_tree(0.2, 0.5, 0.4, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = t.nodes_of_kind(NodeKind::Stop)[0];
        assert!(flip(&t, b, 1, 2.0, &hp(), &mut rng).is_none());
        // object 0 can still stop there
        let (s, _) = flip(&t, b, 0, 2.0, &hp(), &mut rng).unwrap();
        assert!(s.validate().is_empty());
        assert_eq!(s.leaves().len(), 2);
    }

    #[test]
    fn add_then_remove_replicate_restores_tree() {
        let t = three_object_tree(0.2, 0.5, 0.4, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for f in t.preorder().into_iter().skip(1) {
            let e = t.n(f).parent.unwrap();
            let ts = 0.5 * (t.n(e).time + t.n(f).time);
            for kind in [NodeKind::Replicate, NodeKind::Stop] {
                let (a, v) = add_node(&t, f, kind, ts, &hp(), &mut rng);
                assert!(a.validate().is_empty(), "{:?}", a.validate());
                assert!(!a.n(v).acted.is_empty());
                if kind == NodeKind::Replicate {
                    assert_eq!(remove_node(&a, v, &hp(), &mut rng), t);
                } else {
                    assert!(remove_node(&a, v, &hp(), &mut rng).validate().is_empty());
                }
            }
        }
    }

    #[test]
    fn regrow_keeps_validity_and_other_objects() {
        let t = three_object_tree(0.2, 0.5, 0.4, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = t.preorder()[1];
        for _ in 0..200 {
            let r = regrow(&t, a, &[2], &hp(), &mut rng);
            assert!(r.validate().is_empty());
            let r01 = r.restrict_to_objects(&[0, 1]).unwrap();
            assert_eq!(r01, t.restrict_to_objects(&[0, 1]).unwrap());
        }
    }

    #[test]
    fn truncated_exponential_stays_inside() {
        for &(l, w) in &[(1e-8, 0.3), (1.0, 0.5), (50.0, 1.0), (1e3, 1e-4)] {
            for i in 0..=100 {
                let u = i as f64 / 100.0;
                let x = truncated_exp(l, w, u);
                assert!((0.0..=w).contains(&x), "{l} {w} {u} {x}");
            }
            // density integrates to one
            let k = 20_000;
            let h = w / k as f64;
            let s: f64 = (0..k)
                .map(|i| (log_truncated_exp(l, (i as f64 + 0.5) * h, w)).exp() * l * h)
                .sum();
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }
}
