//! CART regression trees and a second-order gradient-boosted ensemble.
//!
//! Rows with `x[feature] < threshold` go left, all others (ties included) go
//! right. Boosted trees store leaf values already scaled by the learning rate.

mod fit;

pub use fit::{fit_cart, fit_gbt, CartParams, GbtParams};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        value: f64,
        cover: f64,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match *self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => cover,
        }
    }
}

/// Serialized node: `feature = -1` marks a leaf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct FlatNode {
    feature: i64,
    threshold: f64,
    left: i64,
    right: i64,
    value: f64,
    cover: f64,
}

impl From<&Node> for FlatNode {
    fn from(n: &Node) -> Self {
        match *n {
            Node::Split {
                feature,
                threshold,
                left,
                right,
                cover,
            } => FlatNode {
                feature: feature as i64,
                threshold,
                left: left as i64,
                right: right as i64,
                value: 0.0,
                cover,
            },
            Node::Leaf { value, cover } => FlatNode {
                feature: -1,
                threshold: 0.0,
                left: -1,
                right: -1,
                value,
                cover,
            },
        }
    }
}

/// A regression tree in a flat arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FlatNode>", into = "Vec<FlatNode>")]
pub struct Tree {
    nodes: Vec<Node>,
}

impl From<Tree> for Vec<FlatNode> {
    fn from(t: Tree) -> Self {
        t.nodes.iter().map(FlatNode::from).collect()
    }
}

impl TryFrom<Vec<FlatNode>> for Tree {
    type Error = Error;

    fn try_from(flat: Vec<FlatNode>) -> Result<Self> {
        let idx = |v: i64| usize::try_from(v).map_err(|_| Error::Integrity(format!("bad child index {v}")));
        let nodes = flat
            .iter()
            .map(|f| {
                Ok(if f.feature < 0 {
                    Node::Leaf {
                        value: f.value,
                        cover: f.cover,
                    }
                } else {
                    Node::Split {
                        feature: f.feature as usize,
                        threshold: f.threshold,
                        left: idx(f.left)?,
                        right: idx(f.right)?,
                        cover: f.cover,
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Tree::new(nodes)
    }
}

impl Tree {
    /// Checks that children follow their parent, every node is reachable
    /// exactly once and values are finite.
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Integrity("tree has no nodes".into()));
        }
        let mut seen = vec![false; nodes.len()];
        seen[0] = true;
        for (i, n) in nodes.iter().enumerate() {
            match *n {
                Node::Split {
                    threshold,
                    left,
                    right,
                    cover,
                    ..
                } => {
                    for c in [left, right] {
                        if c <= i || c >= nodes.len() || seen[c] {
                            return Err(Error::Integrity(format!("node {i} has invalid child {c}")));
                        }
                        seen[c] = true;
                    }
                    if !threshold.is_finite() || !cover.is_finite() {
                        return Err(Error::Integrity(format!("node {i} is not finite")));
                    }
                }
                Node::Leaf { value, cover } => {
                    if !value.is_finite() || !cover.is_finite() {
                        return Err(Error::Integrity(format!("leaf {i} is not finite")));
                    }
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Integrity(format!("node {i} is unreachable")));
        }
        Ok(Self { nodes })
    }

    pub fn leaf(value: f64, cover: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, cover }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    /// Largest feature index used by a split, if any.
    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    /// Multiply every leaf value by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let nodes = self
            .nodes
            .iter()
            .map(|n| match *n {
                Node::Leaf { value, cover } => Node::Leaf { value: value * c, cover },
                split => split,
            })
            .collect();
        Self { nodes }
    }
}

/// `prediction = base_score + sum of tree outputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub base_score: f64,
    /// Already folded into the leaves; kept for reference.
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

impl TreeEnsemble {
    /// Fold `learning_rate` into the leaves of unscaled trees.
    pub fn from_unscaled(base_score: f64, learning_rate: f64, trees: &[Tree]) -> Self {
        Self {
            base_score,
            learning_rate,
            trees: trees.iter().map(|t| t.scaled(learning_rate)).collect(),
        }
    }

    /// A single tree with zero base score.
    pub fn from_tree(tree: Tree) -> Self {
        Self {
            base_score: 0.0,
            learning_rate: 1.0,
            trees: vec![tree],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|x| self.predict(x)).collect()
    }

    pub fn num_features_used(&self) -> usize {
        self.trees.iter().filter_map(Tree::max_feature).max().map_or(0, |f| f + 1)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("ensemble serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_tree() -> Tree {
        Tree::new(vec![
            Node::Split { feature: 0, threshold: 1.5, left: 1, right: 2, cover: 4.0 },
            Node::Leaf { value: 0.0, cover: 2.0 },
            Node::Leaf { value: 1.0, cover: 2.0 },
        ])
        .unwrap()
    }

    #[test]
    fn predict_examples() {
        assert_eq!(Tree::leaf(3.5, 1.0).predict(&[100.0]), 3.5);
        let t = step_tree();
        assert_eq!(t.predict(&[0.7]), 0.0);
        assert_eq!(t.predict(&[1.5]), 1.0);
        assert_eq!(t.depth(), 1);
    }

    #[test]
    fn ensemble_examples() {
        let e = TreeEnsemble { base_score: 2.0, learning_rate: 0.1, trees: vec![] };
        assert_eq!(e.predict(&[1.0]), 2.0);
        let e = TreeEnsemble::from_unscaled(2.0, 0.1, &[Tree::leaf(5.0, 1.0)]);
        assert!((e.predict(&[1.0]) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn json_roundtrip_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let e = TreeEnsemble::from_unscaled(1.0, 0.5, &[step_tree(), Tree::leaf(-1.0, 4.0)]);
        let p = dir.path().join("m.json");
        e.save_json(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"feature\": -1"));
        assert_eq!(TreeEnsemble::load_json(&p).unwrap(), e);
        let bad = text.replacen("\"left\": 1", "\"left\": 0", 1);
        std::fs::write(&p, bad).unwrap();
        assert!(TreeEnsemble::load_json(&p).is_err());
        assert!(Tree::new(vec![Node::Split { feature: 0, threshold: 0.0, left: 1, right: 1, cover: 1.0 }, Node::Leaf { value: 0.0, cover: 1.0 }]).is_err());
    }
}
