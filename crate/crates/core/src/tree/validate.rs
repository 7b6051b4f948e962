use super::{NodeId, NodeKind, Tree};
use crate::objects::ObjectSet;
use std::collections::BTreeSet;
use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Root { detail: String },
    TimeRange { node: NodeId, time: f64 },
    TimeOrdering { node: NodeId, parent: NodeId },
    Structure { node: NodeId, detail: &'static str },
    Counts { node: NodeId, detail: &'static str },
    PathConsistency { node: NodeId, detail: &'static str },
    Unreachable { node: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Root { detail } => write!(f, "root: {detail}"),
            Violation::TimeRange { node, time } => write!(f, "node {node}: time {time} out of range for its kind"),
            Violation::TimeOrdering { node, parent } => {
                write!(f, "node {node}: time not after parent {parent}")
            }
            Violation::Structure { node, detail } => write!(f, "node {node}: {detail}"),
            Violation::Counts { node, detail } => write!(f, "node {node}: {detail}"),
            Violation::PathConsistency { node, detail } => write!(f, "node {node}: {detail}"),
            Violation::Unreachable { node } => write!(f, "node {node} is not reachable from the root"),
        }
    }
}

pub(super) fn validate(tree: &Tree) -> Vec<Violation> {
    let mut out = Vec::new();
    let root_id = tree.root;
    let Some(root) = tree.nodes.get(&root_id) else {
        out.push(Violation::Root {
            detail: "missing".into(),
        });
        return out;
    };
    if root.kind != NodeKind::Root || root.time != 0.0 || root.parent.is_some() {
        out.push(Violation::Root {
            detail: "must be a parentless root node at time 0".into(),
        });
    }
    if tree.n_objects == 0 {
        out.push(Violation::Root {
            detail: "tree has no objects".into(),
        });
    }
    if root.members != ObjectSet::full(tree.n_objects) {
        out.push(Violation::Root {
            detail: "root must carry every object".into(),
        });
    }
    if root.original.is_none() || root.divergent.is_some() {
        out.push(Violation::Root {
            detail: "root must have exactly one child".into(),
        });
    }

    let mut seen = BTreeSet::new();
    let mut stack = vec![root_id];
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            out.push(Violation::Structure {
                node: id,
                detail: "node reached twice",
            });
            continue;
        }
        let n = &tree.nodes[&id];
        for c in n.children() {
            match tree.nodes.get(&c) {
                None => out.push(Violation::Structure {
                    node: id,
                    detail: "child pointer to a missing node",
                }),
                Some(cn) if cn.parent != Some(id) => out.push(Violation::Structure {
                    node: c,
                    detail: "parent pointer disagrees with the parent's child pointer",
                }),
                Some(_) => stack.push(c),
            }
        }
        if id != root_id {
            check_node(tree, id, &mut out);
        }
    }
    for &id in tree.nodes.keys() {
        if !seen.contains(&id) {
            out.push(Violation::Unreachable { node: id });
        }
    }
    out
}

fn check_node(tree: &Tree, id: NodeId, out: &mut Vec<Violation>) {
    let n = &tree.nodes[&id];
    let parent = &tree.nodes[&n.parent.expect("reached through a parent")];

    let time_ok = match n.kind {
        NodeKind::Leaf => n.time == 1.0,
        NodeKind::Replicate | NodeKind::Stop => n.time > 0.0 && n.time < 1.0,
        NodeKind::Root => false,
    };
    if !time_ok {
        out.push(Violation::TimeRange { node: id, time: n.time });
    }
    if n.time <= parent.time {
        out.push(Violation::TimeOrdering {
            node: id,
            parent: n.parent.unwrap(),
        });
    }

    let structure = match n.kind {
        NodeKind::Root => Some("second root node"),
        NodeKind::Leaf if n.original.is_some() || n.divergent.is_some() => Some("leaf has children"),
        NodeKind::Replicate if n.original.is_none() || n.divergent.is_none() => {
            Some("replicate node needs an original and a divergent child")
        }
        NodeKind::Stop if n.divergent.is_some() => Some("stop node has a divergent child"),
        _ => None,
    };
    if let Some(detail) = structure {
        out.push(Violation::Structure { node: id, detail });
    }

    if n.members.is_empty() {
        out.push(Violation::Counts {
            node: id,
            detail: "no particle traverses the branch",
        });
    }
    if !n.members.is_subset(&parent.members) {
        out.push(Violation::PathConsistency {
            node: id,
            detail: "objects on the branch did not reach its start",
        });
    }
    if !n.acted.is_subset(&n.members) {
        out.push(Violation::PathConsistency {
            node: id,
            detail: "an object acted at a node it never reached",
        });
        return;
    }
    let child_members = |c: Option<NodeId>| c.and_then(|c| tree.nodes.get(&c)).map(|c| &c.members);
    match n.kind {
        NodeKind::Replicate => {
            if n.acted.is_empty() {
                out.push(Violation::Counts {
                    node: id,
                    detail: "replicate node with no divergers",
                });
            }
            if let Some(cm) = child_members(n.original) {
                if *cm != n.members {
                    out.push(Violation::PathConsistency {
                        node: id,
                        detail: "original branch must carry every particle",
                    });
                }
            }
            if let Some(cm) = child_members(n.divergent) {
                if *cm != n.acted {
                    out.push(Violation::PathConsistency {
                        node: id,
                        detail: "divergent branch must carry exactly the divergers",
                    });
                }
            }
        }
        NodeKind::Stop => {
            if n.acted.is_empty() {
                out.push(Violation::Counts {
                    node: id,
                    detail: "stop node with no stoppers",
                });
            }
            let rest = n.members.difference(&n.acted);
            match child_members(n.original) {
                None if !rest.is_empty() => out.push(Violation::Structure {
                    node: id,
                    detail: "particles continue past a stop node with no child",
                }),
                Some(_) if rest.is_empty() => out.push(Violation::Structure {
                    node: id,
                    detail: "every particle stopped but the branch continues",
                }),
                Some(cm) if *cm != rest => out.push(Violation::PathConsistency {
                    node: id,
                    detail: "child branch must carry exactly the non-stoppers",
                }),
                _ => {}
            }
        }
        NodeKind::Leaf | NodeKind::Root => {
            if !n.acted.is_empty() {
                out.push(Violation::PathConsistency {
                    node: id,
                    detail: "only stop and replicate nodes record decisions",
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::tests::three_object_tree;
    use crate::tree::{Slot, TreeBuilder};

    #[test]
    fn time_ordering_counterexample() {
        let mut b = TreeBuilder::new(2);
        let r = b.root();
        let a = b.add(r, Slot::Original, NodeKind::Replicate, 0.5, &[0, 1], &[1]);
        let s = b.add(a, Slot::Original, NodeKind::Stop, 0.7, &[0, 1], &[0]);
        b.add(s, Slot::Original, NodeKind::Leaf, 1.0, &[1], &[]);
        b.add(a, Slot::Divergent, NodeKind::Leaf, 1.0, &[1], &[]);
        b.set_time(s, 0.4);
        let v = b.build_unchecked().validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(matches!(v[0], Violation::TimeOrdering { .. }));
    }

    #[test]
    fn stop_at_untraversed_node() {
        let mut b = TreeBuilder::new(2);
        let r = b.root();
        let a = b.add(r, Slot::Original, NodeKind::Replicate, 0.5, &[0, 1], &[1]);
        b.add(a, Slot::Original, NodeKind::Leaf, 1.0, &[0, 1], &[]);
        let d = b.add(a, Slot::Divergent, NodeKind::Stop, 0.8, &[1], &[1]);
        let mut t = b.build().unwrap();
        t.n_mut(d).acted.insert(0);
        let v = t.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(matches!(v[0], Violation::PathConsistency { .. }));
    }

    #[test]
    fn three_object_tree_is_valid() {
        assert!(three_object_tree(0.1, 0.2, 0.3, 0.4).validate().is_empty());
    }

    #[test]
    fn catches_bad_counts_and_structure() {
        let mut t = three_object_tree(0.1, 0.2, 0.3, 0.4);
        let a = t.n(t.root).original.unwrap();
        t.n_mut(a).acted = ObjectSet::new();
        let v = t.validate();
        assert!(v.iter().any(|x| matches!(x, Violation::Counts { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::PathConsistency { .. })));
    }
}
