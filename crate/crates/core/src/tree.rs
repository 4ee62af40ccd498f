//! Prefix-sharing arena for the pruned decoding tree.
//!
//! Node 0 is the root and stands for the prompt. Every other node adds one
//! generated token. Path masses are stored in log space.

use serde::Serialize;

use crate::model::TokenId;
use crate::num::Probability;
use crate::truncation::ActiveSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

pub const ROOT: NodeId = NodeId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Unexpanded,
    Expanded,
    Leaf,
    PrunedByEarlyStop,
    Failed,
}

#[derive(Debug, Clone)]
pub struct TreeNode<P> {
    pub parent: Option<NodeId>,
    pub token: Option<TokenId>,
    pub edge_weight: P,
    pub path_log_mass: P,
    pub depth: usize,
    pub children: Vec<NodeId>,
    pub status: NodeStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("node {0:?} has already been expanded")]
    ExpandingExpandedNode(NodeId),
    #[error("node {0:?} does not exist")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone)]
pub struct PrunedTree<P> {
    nodes: Vec<TreeNode<P>>,
}

impl<P: Probability> Default for PrunedTree<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: Probability> PrunedTree<P> {
    pub fn new() -> Self {
        Self {
            nodes: vec![TreeNode {
                parent: None,
                token: None,
                edge_weight: P::one(),
                path_log_mass: P::zero(),
                depth: 0,
                children: Vec::new(),
                status: NodeStatus::Unexpanded,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: NodeId) -> &TreeNode<P> {
        &self.nodes[id.0]
    }

    pub fn get(&self, id: NodeId) -> Option<&TreeNode<P>> {
        self.nodes.get(id.0)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &TreeNode<P>)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    pub fn set_status(&mut self, id: NodeId, status: NodeStatus) {
        self.nodes[id.0].status = status;
    }

    /// Creates one child per active token. A branching set keeps its
    /// truncated weights; a singleton gets edge weight exactly one.
    /// Children follow the active-set order, so the first child is greedy.
    pub fn expand_node(&mut self, id: NodeId, active: &ActiveSet<P>) -> Result<Vec<NodeId>, TreeError> {
        let parent = self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))?;
        if parent.status != NodeStatus::Unexpanded {
            return Err(TreeError::ExpandingExpandedNode(id));
        }
        let base = parent.path_log_mass;
        let depth = parent.depth + 1;
        let branching = active.is_branching();
        let mut children = Vec::with_capacity(active.len());
        for &(token, weight) in active.members() {
            let edge_weight = if branching { weight } else { P::one() };
            let child = NodeId(self.nodes.len());
            self.nodes.push(TreeNode {
                parent: Some(id),
                token: Some(token),
                edge_weight,
                path_log_mass: base + edge_weight.ln(),
                depth,
                children: Vec::new(),
                status: NodeStatus::Unexpanded,
            });
            children.push(child);
        }
        let parent = &mut self.nodes[id.0];
        parent.children = children.clone();
        parent.status = NodeStatus::Expanded;
        Ok(children)
    }

    /// Generated tokens from the root to `id`.
    pub fn sequence(&self, id: NodeId) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.nodes[id.0].depth);
        let mut cur = id;
        while let Some(parent) = self.nodes[cur.0].parent {
            out.push(self.nodes[cur.0].token.unwrap());
            cur = parent;
        }
        out.reverse();
        out
    }

    /// Ancestor of `id` at `depth` (the node itself if depths match).
    pub fn ancestor_at(&self, id: NodeId, depth: usize) -> Option<NodeId> {
        let mut cur = id;
        while self.nodes[cur.0].depth > depth {
            cur = self.nodes[cur.0].parent?;
        }
        (self.nodes[cur.0].depth == depth).then_some(cur)
    }

    /// Path mass in linear space.
    pub fn mass(&self, id: NodeId) -> P {
        self.nodes[id.0].path_log_mass.exp()
    }

    pub fn dump(&self) -> TreeDump {
        TreeDump {
            nodes: self
                .nodes()
                .map(|(id, n)| DumpNode {
                    id: id.0,
                    parent: n.parent.map(|p| p.0),
                    token: n.token.map(|t| t.0),
                    edge_weight: n.edge_weight.as_f64(),
                    log_mass: n.path_log_mass.as_f64(),
                    status: n.status,
                })
                .collect(),
        }
    }
}

/// Debug dump of the tree (`--dump-tree`).
#[derive(Debug, Clone, Serialize)]
pub struct TreeDump {
    pub nodes: Vec<DumpNode>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DumpNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub token: Option<u32>,
    pub edge_weight: f64,
    pub log_mass: f64,
    pub status: NodeStatus,
}

/// One token stream per leaf: the prompt followed by the leaf's tokens.
pub fn flatten(prompt: &[TokenId], completions: &[Vec<TokenId>]) -> Vec<Vec<TokenId>> {
    completions
        .iter()
        .map(|c| prompt.iter().chain(c).copied().collect())
        .collect()
}

/// Total length of the flattened streams.
pub fn flat_length(streams: &[Vec<TokenId>]) -> usize {
    streams.iter().map(Vec::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NextTokenDistribution;
    use crate::truncation::{active_set, TruncationRule};

    fn set(p: &[f64], rule: TruncationRule<f64>) -> ActiveSet<f64> {
        active_set(&NextTokenDistribution::new(p.to_vec()).unwrap(), &rule)
    }

    #[test]
    fn branching_children_carry_path_mass() {
        let mut tree = PrunedTree::<f64>::new();
        let root_kids = tree.expand_node(ROOT, &set(&[0.9, 0.1], TruncationRule::EpsilonInclusive(0.1))).unwrap();
        let kids = tree.expand_node(root_kids[0], &set(&[0.7, 0.3], TruncationRule::Epsilon(0.1))).unwrap();
        assert!((tree.mass(root_kids[0]) - 0.9).abs() < 1e-15);
        assert!((tree.mass(kids[0]) - 0.63).abs() < 1e-12);
        assert!((tree.mass(kids[1]) - 0.27).abs() < 1e-12);
        assert_eq!(tree.sequence(kids[1]), vec![TokenId(0), TokenId(1)]);
        assert_eq!(tree.ancestor_at(kids[1], 1), Some(root_kids[0]));
    }

    #[test]
    fn singleton_keeps_mass() {
        let mut tree = PrunedTree::<f64>::new();
        let kids = tree.expand_node(ROOT, &set(&[0.95, 0.05], TruncationRule::Epsilon(0.1))).unwrap();
        assert_eq!(kids.len(), 1);
        assert_eq!(tree.node(kids[0]).edge_weight, 1.0);
        assert_eq!(tree.mass(kids[0]), 1.0);
    }

    #[test]
    fn symmetric_split_halves_mass() {
        let mut tree = PrunedTree::<f64>::new();
        let kids = tree.expand_node(ROOT, &set(&[0.5, 0.5], TruncationRule::TopK(2))).unwrap();
        assert_eq!(tree.mass(kids[0]), 0.5);
        assert_eq!(tree.mass(kids[1]), 0.5);
    }

    #[test]
    fn double_expansion_is_an_error() {
        let mut tree = PrunedTree::<f64>::new();
        let a = set(&[1.0], TruncationRule::TopK(1));
        tree.expand_node(ROOT, &a).unwrap();
        assert_eq!(tree.expand_node(ROOT, &a), Err(TreeError::ExpandingExpandedNode(ROOT)));
        assert_eq!(tree.expand_node(NodeId(99), &a), Err(TreeError::UnknownNode(NodeId(99))));
    }

    #[test]
    fn flatten_lengths() {
        let p: Vec<TokenId> = (0..5).map(TokenId).collect();
        let c = vec![TokenId(7), TokenId(8), TokenId(9)];
        assert_eq!(flat_length(&flatten(&p, std::slice::from_ref(&c))), 8);
        assert_eq!(flat_length(&flatten(&p, &[c.clone(), c])), 16);
        let eos_only = flatten(&p, &[vec![TokenId(1)]]);
        assert_eq!(eos_only[0].len(), 6);
        assert_eq!(*eos_only[0].last().unwrap(), TokenId(1));
    }

    #[test]
    fn dump_lists_every_node() {
        let mut tree = PrunedTree::<f64>::new();
        tree.expand_node(ROOT, &set(&[0.6, 0.4], TruncationRule::TopK(2))).unwrap();
        let dump = tree.dump();
        assert_eq!(dump.nodes.len(), 3);
        let json = serde_json::to_string(&dump).unwrap();
        assert!(json.contains("\"status\":\"expanded\""));
    }
}
