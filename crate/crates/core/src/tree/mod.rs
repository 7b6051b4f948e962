//! Tree structures: nodes with times, per-branch particle membership and the
//! decisions particles took at replicate and stop nodes.

mod json;
mod validate;

pub use json::{NodeRecord, ObjectRecord, TreeDocument, TREE_FORMAT_VERSION};
pub use validate::Violation;

use crate::error::{BdtError, Result};
use crate::objects::ObjectSet;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Root,
    Replicate,
    Stop,
    Leaf,
}

/// Which child pointer of a node a branch hangs from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Original,
    Divergent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub(crate) kind: NodeKind,
    pub(crate) time: f64,
    pub(crate) parent: Option<NodeId>,
    pub(crate) original: Option<NodeId>,
    pub(crate) divergent: Option<NodeId>,
    /// Objects whose particles traverse the branch ending at this node.
    pub(crate) members: ObjectSet,
    /// Objects that stopped here (stop node) or sent a replicate down the
    /// divergent branch (replicate node).
    pub(crate) acted: ObjectSet,
}

impl Node {
    pub(crate) fn new(kind: NodeKind, time: f64, members: ObjectSet, acted: ObjectSet) -> Self {
        Node {
            kind,
            time,
            parent: None,
            original: None,
            divergent: None,
            members,
            acted,
        }
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }
    pub fn time(&self) -> f64 {
        self.time
    }
    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }
    pub fn original_child(&self) -> Option<NodeId> {
        self.original
    }
    pub fn divergent_child(&self) -> Option<NodeId> {
        self.divergent
    }
    pub fn child(&self, slot: Slot) -> Option<NodeId> {
        match slot {
            Slot::Original => self.original,
            Slot::Divergent => self.divergent,
        }
    }
    pub fn members(&self) -> &ObjectSet {
        &self.members
    }
    /// Stoppers of a stop node, divergers of a replicate node, empty otherwise.
    pub fn acted(&self) -> &ObjectSet {
        &self.acted
    }
    /// m(v): number of particles down the branch ending here.
    pub fn m(&self) -> usize {
        self.members.len()
    }
    pub fn children(&self) -> impl Iterator<Item = NodeId> {
        self.original.into_iter().chain(self.divergent)
    }
    pub fn is_internal(&self) -> bool {
        matches!(self.kind, NodeKind::Replicate | NodeKind::Stop)
    }
}

/// A beta diffusion tree over objects `0..n_objects`.
#[derive(Clone, Debug)]
pub struct Tree {
    nodes: BTreeMap<NodeId, Node>,
    root: NodeId,
    n_objects: usize,
    next_id: u32,
}

impl PartialEq for Tree {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root && self.n_objects == other.n_objects && self.nodes == other.nodes
    }
}

/// Per-object view of the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticlePaths {
    /// For each object, the nodes whose incoming branch it traverses.
    pub branches: Vec<BTreeSet<NodeId>>,
    /// For each stop node, the objects that stopped there.
    pub stops: BTreeMap<NodeId, BTreeSet<usize>>,
    /// For each replicate node, the objects that took the divergent branch.
    pub divergences: BTreeMap<NodeId, BTreeSet<usize>>,
}

/// Binary allocation matrix, one column per leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub z: DMatrix<f64>,
    pub leaf_order: Vec<NodeId>,
}

impl FeatureMatrix {
    pub fn n_features(&self) -> usize {
        self.leaf_order.len()
    }
    pub fn get(&self, n: usize, k: usize) -> bool {
        self.z[(n, k)] != 0.0
    }
    pub fn nnz(&self) -> usize {
        self.z.iter().filter(|&&x| x != 0.0).count()
    }
}

/// Most-recent-common-ancestor times between leaves, unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeCovariance {
    pub v: DMatrix<f64>,
    pub leaf_order: Vec<NodeId>,
}

impl Tree {
    /// A tree with a root and no branches. Only valid as a starting point for
    /// simulation.
    pub(crate) fn empty(n_objects: usize) -> Self {
        let root = NodeId(0);
        let mut nodes = BTreeMap::new();
        nodes.insert(
            root,
            Node::new(NodeKind::Root, 0.0, ObjectSet::full(n_objects), ObjectSet::new()),
        );
        Tree {
            nodes,
            root,
            n_objects,
            next_id: 1,
        }
    }

    pub(crate) fn from_raw(nodes: BTreeMap<NodeId, Node>, root: NodeId, n_objects: usize) -> Self {
        let next_id = nodes.keys().next_back().map_or(0, |k| k.0 + 1);
        Tree {
            nodes,
            root,
            n_objects,
            next_id,
        }
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }
    pub fn root(&self) -> NodeId {
        self.root
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(&id).ok_or(BdtError::UnknownNode(id.0))
    }

    pub(crate) fn n(&self, id: NodeId) -> &Node {
        &self.nodes[&id]
    }

    pub(crate) fn n_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes.get_mut(&id).expect("node exists")
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes.iter().map(|(k, v)| (*k, v))
    }

    /// Depth-first order from the root, original child before divergent.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            let n = self.n(id);
            if let Some(d) = n.divergent {
                stack.push(d);
            }
            if let Some(o) = n.original {
                stack.push(o);
            }
        }
        out
    }

    pub fn postorder(&self) -> Vec<NodeId> {
        // reverse of a preorder that visits divergent before original
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            let n = self.n(id);
            if let Some(o) = n.original {
                stack.push(o);
            }
            if let Some(d) = n.divergent {
                stack.push(d);
            }
        }
        out.reverse();
        out
    }

    /// Nodes below `id`, including `id`.
    pub fn subtree(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(v) = stack.pop() {
            out.push(v);
            stack.extend(self.n(v).children());
        }
        out
    }

    /// Leaves in depth-first order, original before divergent.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.preorder()
            .into_iter()
            .filter(|&id| self.n(id).kind == NodeKind::Leaf)
            .collect()
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.kind == kind)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.values().filter(|n| n.kind == kind).count()
    }

    /// Number of replicate plus stop nodes.
    pub fn internal_count(&self) -> usize {
        self.nodes.values().filter(|n| n.is_internal()).count()
    }

    /// Non-root nodes; each identifies the branch ending at it.
    pub fn branch_ends(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.iter().filter(|(_, n)| n.kind != NodeKind::Root)
    }

    /// Σ m(v) over non-root nodes.
    pub fn sum_m(&self) -> usize {
        self.branch_ends().map(|(_, n)| n.m()).sum()
    }

    /// Σ m(v) over replicate and stop nodes.
    pub fn sum_m_internal(&self) -> usize {
        self.nodes.values().filter(|n| n.is_internal()).map(|n| n.m()).sum()
    }

    pub fn slot_of(&self, child: NodeId) -> Option<(NodeId, Slot)> {
        let p = self.n(child).parent?;
        let pn = self.n(p);
        if pn.original == Some(child) {
            Some((p, Slot::Original))
        } else if pn.divergent == Some(child) {
            Some((p, Slot::Divergent))
        } else {
            None
        }
    }

    /// (m, n) where n is the stop count of a stop node or the divergence
    /// count of a replicate node.
    pub fn particle_counts(&self, id: NodeId) -> Result<(usize, usize)> {
        let n = self.node(id)?;
        match n.kind {
            NodeKind::Replicate | NodeKind::Stop => Ok((n.m(), n.acted.len())),
            k => Err(BdtError::InvalidArgument(format!(
                "node {id} is a {k:?} node; stop/divergence counts exist only for stop and replicate nodes"
            ))),
        }
    }

    pub fn paths(&self) -> ParticlePaths {
        let mut branches = vec![BTreeSet::new(); self.n_objects];
        let mut stops = BTreeMap::new();
        let mut divergences = BTreeMap::new();
        for (id, n) in self.branch_ends() {
            for o in n.members.iter() {
                if o < self.n_objects {
                    branches[o].insert(id);
                }
            }
            match n.kind {
                NodeKind::Stop => {
                    stops.insert(id, n.acted.iter().collect());
                }
                NodeKind::Replicate => {
                    divergences.insert(id, n.acted.iter().collect());
                }
                _ => {}
            }
        }
        ParticlePaths {
            branches,
            stops,
            divergences,
        }
    }

    pub fn feature_matrix(&self) -> FeatureMatrix {
        let leaves = self.leaves();
        let mut z = DMatrix::zeros(self.n_objects, leaves.len());
        for (k, &l) in leaves.iter().enumerate() {
            for o in self.n(l).members.iter() {
                z[(o, k)] = 1.0;
            }
        }
        FeatureMatrix { z, leaf_order: leaves }
    }

    /// Ancestors of `id` from the root down to `id` itself.
    pub fn lineage(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(p) = self.n(cur).parent {
            out.push(p);
            cur = p;
        }
        out.reverse();
        out
    }

    pub fn mrca_covariance(&self) -> TreeCovariance {
        let leaves = self.leaves();
        let lineages: Vec<Vec<NodeId>> = leaves.iter().map(|&l| self.lineage(l)).collect();
        let k = leaves.len();
        let mut v = DMatrix::from_element(k, k, 1.0);
        for a in 0..k {
            for b in a + 1..k {
                let common = lineages[a]
                    .iter()
                    .zip(&lineages[b])
                    .take_while(|(x, y)| x == y)
                    .last()
                    .map(|(x, _)| *x)
                    .unwrap_or(self.root);
                let t = self.n(common).time;
                v[(a, b)] = t;
                v[(b, a)] = t;
            }
        }
        TreeCovariance { v, leaf_order: leaves }
    }

    /// The tree traced out by the objects in `subset` alone, with objects
    /// relabelled by rank within the subset. Node ids are preserved.
    pub fn restrict_to_objects(&self, subset: &[usize]) -> Result<Tree> {
        let keep: BTreeSet<usize> = subset.iter().copied().collect();
        if keep.is_empty() {
            return Err(BdtError::InvalidArgument("restriction subset is empty".into()));
        }
        if let Some(&bad) = keep.iter().find(|&&o| o >= self.n_objects) {
            return Err(BdtError::InvalidArgument(format!(
                "object {bad} out of range for a tree over {} objects",
                self.n_objects
            )));
        }
        let rank: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(i, &o)| (o, i)).collect();
        let relabel = |s: &ObjectSet| -> ObjectSet { s.iter().filter_map(|o| rank.get(&o).copied()).collect() };
        let mut out = self.clone();
        out.n_objects = keep.len();
        for n in out.nodes.values_mut() {
            n.members = relabel(&n.members);
            n.acted = relabel(&n.acted);
        }
        out.cleanup();
        Ok(out)
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate::validate(self)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(BdtError::InvalidTree(v))
        }
    }

    // ---- mutation, crate-internal ----

    fn alloc(&mut self, node: Node) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(id, node);
        id
    }

    /// Hangs a new node from an empty slot of `parent`.
    pub(crate) fn attach(&mut self, parent: NodeId, slot: Slot, mut node: Node) -> NodeId {
        debug_assert!(self.n(parent).child(slot).is_none());
        node.parent = Some(parent);
        let id = self.alloc(node);
        let p = self.n_mut(parent);
        match slot {
            Slot::Original => p.original = Some(id),
            Slot::Divergent => p.divergent = Some(id),
        }
        id
    }

    /// Inserts a new node on the branch ending at `child`; `child` becomes its
    /// original child.
    pub(crate) fn insert_above(&mut self, child: NodeId, mut node: Node) -> NodeId {
        let (parent, slot) = self.slot_of(child).expect("child has a parent");
        node.parent = Some(parent);
        node.original = Some(child);
        node.divergent = None;
        let id = self.alloc(node);
        self.n_mut(child).parent = Some(id);
        let p = self.n_mut(parent);
        match slot {
            Slot::Original => p.original = Some(id),
            Slot::Divergent => p.divergent = Some(id),
        }
        id
    }

    /// Removes `obj` from `id` and every node below it. Leaves degenerate
    /// nodes in place; call [`Tree::cleanup`] afterwards.
    pub(crate) fn remove_object_below(&mut self, id: NodeId, obj: usize) {
        let mut stack = vec![id];
        while let Some(v) = stack.pop() {
            let n = self.n_mut(v);
            if !n.members.remove(obj) {
                continue;
            }
            n.acted.remove(obj);
            stack.extend(n.children());
        }
    }

    /// Deletes the subtree rooted at `id` and clears the parent's pointer.
    pub(crate) fn delete_subtree(&mut self, id: NodeId) {
        if let Some((p, slot)) = self.slot_of(id) {
            let pn = self.n_mut(p);
            match slot {
                Slot::Original => pn.original = None,
                Slot::Divergent => pn.divergent = None,
            }
        }
        for v in self.subtree(id) {
            self.nodes.remove(&v);
        }
    }

    /// Removes a node with a single child, joining its two branches.
    fn splice_out(&mut self, id: NodeId) {
        let (p, slot) = self.slot_of(id).expect("spliced node has a parent");
        let child = self.n(id).original;
        debug_assert!(self.n(id).divergent.is_none());
        if let Some(c) = child {
            self.n_mut(c).parent = Some(p);
        }
        let pn = self.n_mut(p);
        match slot {
            Slot::Original => pn.original = child,
            Slot::Divergent => pn.divergent = child,
        }
        self.nodes.remove(&id);
    }

    /// Deletes branches nobody traverses and splices out replicate nodes with
    /// no divergers and stop nodes with no stoppers.
    pub(crate) fn cleanup(&mut self) {
        for id in self.postorder() {
            if id == self.root || !self.nodes.contains_key(&id) {
                continue;
            }
            let n = self.n(id);
            let (kind, divergent) = (n.kind, n.divergent);
            if n.members.is_empty() {
                self.delete_subtree(id);
                continue;
            }
            if !n.acted.is_empty() {
                continue;
            }
            match kind {
                NodeKind::Replicate => {
                    if let Some(d) = divergent {
                        self.delete_subtree(d);
                    }
                    self.splice_out(id)
                }
                NodeKind::Stop => self.splice_out(id),
                _ => {}
            }
        }
    }

    /// Registers one more object, traversing the root branch only.
    pub(crate) fn push_object(&mut self) -> usize {
        let obj = self.n_objects;
        self.n_objects += 1;
        let root = self.root;
        self.n_mut(root).members.insert(obj);
        obj
    }

    pub(crate) fn set_time(&mut self, id: NodeId, t: f64) {
        self.n_mut(id).time = t;
    }
}

/// Assembles a tree node by node, mainly for tests and fixtures.
#[derive(Clone, Debug)]
pub struct TreeBuilder {
    tree: Tree,
}

impl TreeBuilder {
    pub fn new(n_objects: usize) -> Self {
        TreeBuilder {
            tree: Tree::empty(n_objects),
        }
    }

    pub fn root(&self) -> NodeId {
        self.tree.root
    }

    /// Adds a node below `parent` in `slot`. `members` are the objects down the
    /// new branch; `acted` the stoppers or divergers.
    pub fn add(
        &mut self,
        parent: NodeId,
        slot: Slot,
        kind: NodeKind,
        time: f64,
        members: &[usize],
        acted: &[usize],
    ) -> NodeId {
        let node = Node::new(
            kind,
            time,
            members.iter().copied().collect(),
            acted.iter().copied().collect(),
        );
        self.tree.attach(parent, slot, node)
    }

    /// Overrides a node time, allowing invalid trees to be built on purpose.
    pub fn set_time(&mut self, id: NodeId, t: f64) {
        self.tree.set_time(id, t);
    }

    pub fn build(self) -> Result<Tree> {
        self.tree.check()?;
        Ok(self.tree)
    }

    pub fn build_unchecked(self) -> Tree {
        self.tree
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Three objects, leaves {0,2} and {1,2}.
    pub(crate) fn three_object_tree(ta: f64, tb: f64, tc: f64, td: f64) -> Tree {
        let mut b = TreeBuilder::new(3);
        let r = b.root();
        let a = b.add(r, Slot::Original, NodeKind::Replicate, ta, &[0, 1, 2], &[1, 2]);
        let sb = b.add(a, Slot::Original, NodeKind::Stop, tb, &[0, 1, 2], &[1]);
        b.add(sb, Slot::Original, NodeKind::Leaf, 1.0, &[0, 2], &[]);
        let c = b.add(a, Slot::Divergent, NodeKind::Replicate, tc, &[1, 2], &[2]);
        b.add(c, Slot::Original, NodeKind::Leaf, 1.0, &[1, 2], &[]);
        b.add(c, Slot::Divergent, NodeKind::Stop, td, &[2], &[2]);
        b.build().unwrap()
    }

    #[test]
    fn three_object_tree_feature_matrix_and_covariance() {
        let t = three_object_tree(0.3, 0.5, 0.6, 0.8);
        let z = t.feature_matrix();
        assert_eq!(z.z, DMatrix::from_row_slice(3, 2, &[1., 0., 0., 1., 1., 1.]));
        let v = t.mrca_covariance();
        assert_eq!(v.v, DMatrix::from_row_slice(2, 2, &[1., 0.3, 0.3, 1.]));
        assert_eq!(t.internal_count(), 4);
        assert_eq!(t.count_kind(NodeKind::Leaf), 2);
    }

    #[test]
    fn particle_counts_three_object_tree() {
        let t = three_object_tree(0.3, 0.5, 0.6, 0.8);
        let a = t.n(t.root).original.unwrap();
        assert_eq!(t.particle_counts(a).unwrap(), (3, 2));
        let two = t.restrict_to_objects(&[0, 1]).unwrap();
        assert_eq!(two.particle_counts(a).unwrap(), (2, 1));
        let leaf = t.leaves()[0];
        assert!(t.particle_counts(leaf).is_err());
        assert!(matches!(
            t.particle_counts(NodeId(999)),
            Err(BdtError::UnknownNode(999))
        ));
    }

    #[test]
    fn single_object_bare_branch() {
        let mut b = TreeBuilder::new(1);
        let r = b.root();
        b.add(r, Slot::Original, NodeKind::Leaf, 1.0, &[0], &[]);
        let t = b.build().unwrap();
        assert_eq!(t.feature_matrix().z, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(t.mrca_covariance().v, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn restriction() {
        let t = three_object_tree(0.3, 0.5, 0.6, 0.8);
        assert_eq!(t.restrict_to_objects(&[0, 1, 2]).unwrap(), t);
        let one = t.restrict_to_objects(&[0]).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one.internal_count(), 0);
        assert!(one.validate().is_empty());
        assert!(t.restrict_to_objects(&[]).is_err());
        // object 2 alone keeps a, b is spliced, c and d persist
        let only2 = t.restrict_to_objects(&[2]).unwrap();
        assert!(only2.validate().is_empty());
        assert_eq!(only2.count_kind(NodeKind::Replicate), 2);
        assert_eq!(only2.count_kind(NodeKind::Stop), 1);
    }

    #[test]
    fn paths_view() {
        let t = three_object_tree(0.3, 0.5, 0.6, 0.8);
        let p = t.paths();
        assert_eq!(p.branches[0].len(), 3);
        assert_eq!(p.branches[2].len(), 6);
        assert_eq!(p.stops.values().map(|s| s.len()).sum::<usize>(), 2);
        assert_eq!(p.divergences.values().map(|s| s.len()).sum::<usize>(), 3);
    }
}
