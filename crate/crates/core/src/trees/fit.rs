use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Node, Tree, TreeEnsemble};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for CartParams {
    fn default() -> Self {
        Self {
            max_depth: 4,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtParams {
    pub n_rounds: usize,
    pub eta: f64,
    pub max_depth: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            eta: 0.1,
            max_depth: 3,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta.is_finite()
            && self.eta > 0.0
            && self.lambda.is_finite()
            && self.lambda >= 0.0
            && self.gamma.is_finite()
            && self.gamma >= 0.0
            && self.min_child_weight.is_finite()
            && self.min_child_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid boosting parameters {self:?}")))
        }
    }
}

enum Objective<'a> {
    /// Variance reduction; leaves predict the mean target.
    Cart { y: &'a [f64], min_leaf: usize },
    /// Regularized second-order gain with unit hessians.
    Boost { g: &'a [f64], lambda: f64, gamma: f64, min_child_weight: f64, eta: f64 },
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    objective: Objective<'a>,
    max_depth: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    /// Per-row statistic summed in the gain: centred targets or gradients.
    fn stats(&self, rows: &[usize]) -> Vec<f64> {
        match self.objective {
            Objective::Cart { y, .. } => {
                let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
                rows.iter().map(|&i| y[i] - mean).collect()
            }
            Objective::Boost { g, .. } => rows.iter().map(|&i| g[i]).collect(),
        }
    }

    fn leaf_value(&self, rows: &[usize]) -> f64 {
        let n = rows.len() as f64;
        match self.objective {
            Objective::Cart { y, .. } => rows.iter().map(|&i| y[i]).sum::<f64>() / n,
            Objective::Boost { g, lambda, eta, .. } => {
                let gs: f64 = rows.iter().map(|&i| g[i]).sum();
                -gs / (n + lambda) * eta
            }
        }
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        match self.objective {
            Objective::Cart { .. } => g * g / h,
            Objective::Boost { lambda, .. } => g * g / (h + lambda),
        }
    }

    fn allowed(&self, nl: usize, nr: usize) -> bool {
        match self.objective {
            Objective::Cart { min_leaf, .. } => nl >= min_leaf.max(1) && nr >= min_leaf.max(1),
            Objective::Boost { min_child_weight, .. } => {
                nl > 0 && nr > 0 && nl as f64 >= min_child_weight && nr as f64 >= min_child_weight
            }
        }
    }

    fn gain(&self, gl: f64, nl: usize, gr: f64, nr: usize) -> f64 {
        let parent = self.score(gl + gr, (nl + nr) as f64);
        let children = self.score(gl, nl as f64) + self.score(gr, nr as f64);
        match self.objective {
            Objective::Cart { .. } => children - parent,
            Objective::Boost { gamma, .. } => 0.5 * (children - parent) - gamma,
        }
    }

    /// Best split on one feature: lowest threshold among equal gains.
    fn best_for_feature(&self, rows: &[usize], stats: &[f64], f: usize) -> Option<Split> {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| self.x[rows[a]][f].total_cmp(&self.x[rows[b]][f]));
        let total: f64 = stats.iter().sum();
        let mut gl = 0.0;
        let mut best: Option<Split> = None;
        for k in 0..order.len() - 1 {
            gl += stats[order[k]];
            let (lo, hi) = (self.x[rows[order[k]]][f], self.x[rows[order[k + 1]]][f]);
            if lo == hi {
                continue;
            }
            let (nl, nr) = (k + 1, order.len() - k - 1);
            if !self.allowed(nl, nr) {
                continue;
            }
            let gain = self.gain(gl, nl, total - gl, nr);
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold <= lo {
                    threshold = hi;
                }
                best = Some(Split { feature: f, threshold, gain });
            }
        }
        best
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let cover = rows.len() as f64;
        self.nodes.push(Node::Leaf {
            value: self.leaf_value(&rows),
            cover,
        });
        if depth >= self.max_depth || rows.len() < 2 {
            return id;
        }
        let stats = self.stats(&rows);
        let nf = self.x[0].len();
        let per_feature: Vec<Option<Split>> =
            (0..nf).into_par_iter().map(|f| self.best_for_feature(&rows, &stats, f)).collect();
        let mut best: Option<Split> = None;
        for s in per_feature.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| s.gain > b.gain) {
                best = Some(s);
            }
        }
        let Some(split) = best.filter(|s| s.gain > 0.0) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][split.feature] < split.threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            cover,
        };
        id
    }
}

fn check_data(x: &[Vec<f64>], y: &[f64], min_rows: usize) -> Result<()> {
    if x.len() < min_rows || x.len() != y.len() {
        return Err(Error::Config(format!(
            "need at least {min_rows} rows with matching targets, got {} rows and {} targets",
            x.len(),
            y.len()
        )));
    }
    let nf = x[0].len();
    if x.iter().any(|r| r.len() != nf) {
        return Err(Error::Shape("feature rows differ in length".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Parameter("features and targets must be finite".into()));
    }
    Ok(())
}

/// Greedy variance-reduction tree over midpoints of sorted unique values.
pub fn fit_cart(x: &[Vec<f64>], y: &[f64], params: &CartParams) -> Result<Tree> {
    check_data(x, y, 1)?;
    let mut b = Builder {
        x,
        objective: Objective::Cart {
            y,
            min_leaf: params.min_samples_leaf,
        },
        max_depth: params.max_depth,
        nodes: Vec::new(),
    };
    b.build((0..x.len()).collect(), 0);
    Tree::new(b.nodes)
}

/// Squared-error boosting from `base_score = mean(y)`.
pub fn fit_gbt(x: &[Vec<f64>], y: &[f64], params: &GbtParams) -> Result<TreeEnsemble> {
    params.validate()?;
    check_data(x, y, 2)?;
    let base = y.iter().sum::<f64>() / y.len() as f64;
    let mut pred = vec![base; y.len()];
    let mut trees = Vec::with_capacity(params.n_rounds);
    for _ in 0..params.n_rounds {
        let g: Vec<f64> = pred.iter().zip(y).map(|(p, t)| p - t).collect();
        let mut b = Builder {
            x,
            objective: Objective::Boost {
                g: &g,
                lambda: params.lambda,
                gamma: params.gamma,
                min_child_weight: params.min_child_weight,
                eta: params.eta,
            },
            max_depth: params.max_depth,
            nodes: Vec::new(),
        };
        b.build((0..x.len()).collect(), 0);
        let tree = Tree::new(b.nodes)?;
        for (p, row) in pred.iter_mut().zip(x) {
            *p += tree.predict(row);
        }
        trees.push(tree);
    }
    Ok(TreeEnsemble {
        base_score: base,
        learning_rate: params.eta,
        trees,
    })
}
