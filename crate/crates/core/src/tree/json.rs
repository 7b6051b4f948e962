use super::{Node, NodeId, NodeKind, Tree};
use crate::error::{BdtError, Result};
use crate::objects::ObjectSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const TREE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub kind: NodeKind,
    pub time: f64,
    pub parent: Option<NodeId>,
    pub original_child: Option<NodeId>,
    pub divergent_child: Option<NodeId>,
}

/// Path of one object: branches traversed (named by their end node), stop
/// nodes where it stopped, replicate nodes where it diverged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub object: usize,
    pub branches: Vec<NodeId>,
    pub stopped_at: Vec<NodeId>,
    pub diverged_at: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub version: u32,
    pub n_objects: usize,
    pub root: NodeId,
    pub nodes: Vec<NodeRecord>,
    pub objects: Vec<ObjectRecord>,
}

impl From<&Tree> for TreeDocument {
    fn from(tree: &Tree) -> Self {
        let nodes = tree
            .iter()
            .map(|(id, n)| NodeRecord {
                id,
                kind: n.kind,
                time: n.time,
                parent: n.parent,
                original_child: n.original,
                divergent_child: n.divergent,
            })
            .collect();
        let mut objects: Vec<ObjectRecord> = (0..tree.n_objects)
            .map(|o| ObjectRecord {
                object: o,
                branches: vec![],
                stopped_at: vec![],
                diverged_at: vec![],
            })
            .collect();
        for (id, n) in tree.branch_ends() {
            for o in n.members.iter().filter(|&o| o < tree.n_objects) {
                objects[o].branches.push(id);
            }
            for o in n.acted.iter().filter(|&o| o < tree.n_objects) {
                match n.kind {
                    NodeKind::Stop => objects[o].stopped_at.push(id),
                    _ => objects[o].diverged_at.push(id),
                }
            }
        }
        TreeDocument {
            version: TREE_FORMAT_VERSION,
            n_objects: tree.n_objects,
            root: tree.root,
            nodes,
            objects,
        }
    }
}

impl TreeDocument {
    /// Rebuilds the tree without checking its invariants.
    pub fn to_tree_unchecked(&self) -> Result<Tree> {
        if self.version != TREE_FORMAT_VERSION {
            return Err(BdtError::UnsupportedVersion(self.version));
        }
        let mut nodes: BTreeMap<NodeId, Node> = BTreeMap::new();
        for r in &self.nodes {
            let mut n = Node::new(r.kind, r.time, ObjectSet::new(), ObjectSet::new());
            n.parent = r.parent;
            n.original = r.original_child;
            n.divergent = r.divergent_child;
            if nodes.insert(r.id, n).is_some() {
                return Err(BdtError::InvalidArgument(format!("duplicate node id {}", r.id)));
            }
        }
        let root = nodes.get_mut(&self.root).ok_or(BdtError::UnknownNode(self.root.0))?;
        root.members = ObjectSet::full(self.n_objects);
        for rec in &self.objects {
            if rec.object >= self.n_objects {
                return Err(BdtError::InvalidArgument(format!("object {} out of range", rec.object)));
            }
            let groups = [
                (&rec.branches, false),
                (&rec.stopped_at, true),
                (&rec.diverged_at, true),
            ];
            for (ids, acted) in groups {
                for id in ids {
                    let n = nodes.get_mut(id).ok_or(BdtError::UnknownNode(id.0))?;
                    if acted {
                        n.acted.insert(rec.object);
                    } else {
                        n.members.insert(rec.object);
                    }
                }
            }
        }
        Ok(Tree::from_raw(nodes, self.root, self.n_objects))
    }

    pub fn to_tree(&self) -> Result<Tree> {
        let t = self.to_tree_unchecked()?;
        t.check()?;
        Ok(t)
    }
}

impl Tree {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TreeDocument::from(self))?)
    }

    pub fn to_json_compact(&self) -> Result<String> {
        Ok(serde_json::to_string(&TreeDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Tree> {
        let doc: TreeDocument = serde_json::from_str(s)?;
        doc.to_tree()
    }
}
