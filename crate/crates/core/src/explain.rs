//! Exact path-dependent SHAP values for tree ensembles, importance ranking and
//! dependence-plot export.
//!
//! Absent features are marginalized by descending both branches weighted by
//! node cover. [`tree_shap`] uses the polynomial-time path algorithm;
//! [`brute_shap_oracle`] enumerates subsets of the same value function.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trees::{Node, Tree, TreeEnsemble};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub prediction: f64,
}

impl Attribution {
    /// `|base_value + sum(phi) - prediction|`.
    pub fn local_accuracy_gap(&self) -> f64 {
        (self.base_value + self.phi.iter().sum::<f64>() - self.prediction).abs()
    }
}

fn check(ens: &TreeEnsemble, nf: usize) -> Result<()> {
    for (t, tree) in ens.trees.iter().enumerate() {
        for (i, n) in tree.nodes().iter().enumerate() {
            if !(n.cover() > 0.0) {
                return Err(Error::Integrity(format!("tree {t} node {i} has cover {}", n.cover())));
            }
            if let Node::Split { feature, .. } = n {
                if *feature >= nf {
                    return Err(Error::Shape(format!("tree {t} splits on feature {feature} of {nf}")));
                }
            }
        }
    }
    Ok(())
}

/// Cover-weighted mean of the leaf values.
fn expected_value(tree: &Tree, i: usize) -> f64 {
    match *tree.node(i) {
        Node::Leaf { value, .. } => value,
        Node::Split { left, right, cover, .. } => {
            (tree.node(left).cover() * expected_value(tree, left) + tree.node(right).cover() * expected_value(tree, right))
                / cover
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d = depth as f64;
    for i in (0..depth).rev() {
        let w = path[i].weight;
        path[i + 1].weight += one * w * (i as f64 + 1.0) / (d + 1.0);
        path[i].weight = zero * w * (d - i as f64) / (d + 1.0);
    }
}

fn unwind(path: &mut Vec<PathElem>, index: usize) {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElem { one, zero, .. } = path[index];
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * (d + 1.0) / ((i as f64 + 1.0) * one);
            next = tmp - path[i].weight * zero * (d - i as f64) / (d + 1.0);
        } else {
            path[i].weight = path[i].weight * (d + 1.0) / (zero * (d - i as f64));
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

/// Total weight of the path with element `index` removed.
fn unwound_sum(path: &[PathElem], index: usize) -> f64 {
    let depth = path.len() - 1;
    let d = depth as f64;
    let PathElem { one, zero, .. } = path[index];
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next * (d + 1.0) / ((i as f64 + 1.0) * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (d - i as f64) / (d + 1.0);
        } else {
            total += path[i].weight / zero * (d + 1.0) / (d - i as f64);
        }
    }
    total
}

struct Walk<'a> {
    tree: &'a Tree,
    x: &'a [f64],
    phi: &'a mut [f64],
}

impl Walk<'_> {
    fn recurse(&mut self, node: usize, parent: &[PathElem], zero: f64, one: f64, feature: Option<usize>) {
        let mut path = parent.to_vec();
        extend(&mut path, zero, one, feature);
        match *self.tree.node(node) {
            Node::Leaf { value, .. } => {
                for i in 1..path.len() {
                    let w = unwound_sum(&path, i);
                    let e = path[i];
                    self.phi[e.feature.expect("only the root element lacks a feature")] += w * (e.one - e.zero) * value;
                }
            }
            Node::Split {
                feature: f,
                threshold,
                left,
                right,
                cover,
            } => {
                let (hot, cold) = if self.x[f] < threshold { (left, right) } else { (right, left) };
                let (mut in_zero, mut in_one) = (1.0, 1.0);
                if let Some(k) = path.iter().position(|e| e.feature == Some(f)) {
                    in_zero = path[k].zero;
                    in_one = path[k].one;
                    unwind(&mut path, k);
                }
                let hz = self.tree.node(hot).cover() / cover;
                let cz = self.tree.node(cold).cover() / cover;
                self.recurse(hot, &path, hz * in_zero, in_one, Some(f));
                self.recurse(cold, &path, cz * in_zero, 0.0, Some(f));
            }
        }
    }
}

/// Exact SHAP values of `x` under cover-weighted conditional expectations.
pub fn tree_shap(ens: &TreeEnsemble, x: &[f64]) -> Result<Attribution> {
    check(ens, x.len())?;
    let mut phi = vec![0.0; x.len()];
    let mut base = ens.base_score;
    for tree in &ens.trees {
        base += expected_value(tree, 0);
        Walk { tree, x, phi: &mut phi }.recurse(0, &[], 1.0, 1.0, None);
    }
    Ok(Attribution {
        base_value: base,
        phi,
        prediction: ens.predict(x),
    })
}

/// Attributions of many rows, in parallel.
pub fn shap_all(ens: &TreeEnsemble, rows: &[Vec<f64>]) -> Result<Vec<Attribution>> {
    rows.par_iter().map(|x| tree_shap(ens, x)).collect()
}

/// Largest feature count [`brute_shap_oracle`] accepts.
pub const ORACLE_MAX_FEATURES: usize = 12;

/// `v(S)`: features in `known` follow `x`, the rest are averaged by cover.
fn subset_value(tree: &Tree, i: usize, x: &[f64], known: u32) -> f64 {
    match *tree.node(i) {
        Node::Leaf { value, .. } => value,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            if known >> feature & 1 == 1 {
                subset_value(tree, if x[feature] < threshold { left } else { right }, x, known)
            } else {
                (tree.node(left).cover() * subset_value(tree, left, x, known)
                    + tree.node(right).cover() * subset_value(tree, right, x, known))
                    / cover
            }
        }
    }
}

/// Shapley values by enumerating every feature subset.
pub fn brute_shap_oracle(ens: &TreeEnsemble, x: &[f64]) -> Result<Attribution> {
    let f = x.len();
    if f > ORACLE_MAX_FEATURES {
        return Err(Error::Refused(format!(
            "subset enumeration over {f} features exceeds the limit of {ORACLE_MAX_FEATURES}"
        )));
    }
    check(ens, f)?;
    let v = |s: u32| ens.base_score + ens.trees.iter().map(|t| subset_value(t, 0, x, s)).sum::<f64>();
    let values: Vec<f64> = (0..1u32 << f).map(v).collect();
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    let weights: Vec<f64> = (0..f).map(|s| fact(s) * fact(f - s - 1) / fact(f)).collect();
    let mut phi = vec![0.0; f];
    for (i, p) in phi.iter_mut().enumerate() {
        for s in 0..1u32 << f {
            if s >> i & 1 == 0 {
                *p += weights[s.count_ones() as usize] * (values[(s | 1 << i) as usize] - values[s as usize]);
            }
        }
    }
    Ok(Attribution {
        base_value: values[0],
        phi,
        prediction: ens.predict(x),
    })
}

/// Features by descending mean `|phi|`, ties by index.
pub fn importance(attrs: &[Attribution]) -> Vec<(usize, f64)> {
    let nf = attrs.first().map_or(0, |a| a.phi.len());
    let mut ranked: Vec<(usize, f64)> = (0..nf)
        .map(|f| (f, attrs.iter().map(|a| a.phi[f].abs()).sum::<f64>() / attrs.len() as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Feature ranked right after `f`, or the top-ranked other feature when `f` is last.
pub fn default_color_feature(ranking: &[(usize, f64)], f: usize) -> Option<usize> {
    let pos = ranking.iter().position(|r| r.0 == f)?;
    ranking
        .get(pos + 1)
        .or_else(|| ranking.iter().find(|r| r.0 != f))
        .map(|r| r.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceRow {
    pub x_f: f64,
    pub phi_f: f64,
    pub x_c: f64,
}

/// `(x_f, phi_f, x_c)` per sample, sorted by `x_f`.
pub fn dependence_export(attrs: &[Attribution], x: &[Vec<f64>], f: usize, c: Option<usize>) -> Result<Vec<DependenceRow>> {
    if attrs.len() != x.len() {
        return Err(Error::Shape(format!("{} attributions for {} rows", attrs.len(), x.len())));
    }
    let nf = attrs.first().map_or(0, |a| a.phi.len());
    let c = match c {
        Some(c) => c,
        None => default_color_feature(&importance(attrs), f).unwrap_or(f),
    };
    if f >= nf || c >= nf {
        return Err(Error::Config(format!("feature {f} or color {c} out of range for {nf} features")));
    }
    let mut rows: Vec<DependenceRow> = attrs
        .iter()
        .zip(x)
        .map(|(a, r)| DependenceRow {
            x_f: r[f],
            phi_f: a.phi[f],
            x_c: r[c],
        })
        .collect();
    rows.sort_by(|a, b| a.x_f.total_cmp(&b.x_f));
    Ok(rows)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))
}

/// `subject_id, base_value, phi_0.., prediction`.
pub fn write_attributions_csv(path: &Path, ids: &[String], attrs: &[Attribution]) -> Result<()> {
    let mut w = writer(path)?;
    let nf = attrs.first().map_or(0, |a| a.phi.len());
    let header = ["subject_id".to_owned(), "base_value".to_owned()]
        .into_iter()
        .chain((0..nf).map(|i| format!("phi_{i}")))
        .chain(["prediction".to_owned()]);
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for (id, a) in ids.iter().zip(attrs) {
        let rec = [id.clone(), a.base_value.to_string()]
            .into_iter()
            .chain(a.phi.iter().map(f64::to_string))
            .chain([a.prediction.to_string()]);
        w.write_record(rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dependence_csv(path: &Path, rows: &[DependenceRow]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(["x_f", "phi_f", "x_c"]).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `rank, feature, mean_abs_shap`, ranks from 1; `names` label the features.
pub fn write_importance_csv(path: &Path, ranking: &[(usize, f64)], names: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["rank", "feature", "mean_abs_shap"]).map_err(|e| Error::csv(path, e))?;
    for (rank, &(f, m)) in ranking.iter().enumerate() {
        let name = names.get(f).cloned().unwrap_or_else(|| f.to_string());
        w.write_record([(rank + 1).to_string(), name, m.to_string()]).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::{fit_gbt, GbtParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stump(value_left: f64, value_right: f64) -> Tree {
        Tree::new(vec![
            Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2, cover: 100.0 },
            Node::Leaf { value: value_left, cover: 50.0 },
            Node::Leaf { value: value_right, cover: 50.0 },
        ])
        .unwrap()
    }

    /// Random tree with consistent integer covers; features may repeat on a path.
    fn random_tree(rng: &mut ChaCha8Rng, nf: usize, depth: usize) -> Tree {
        fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, nf: usize, depth: usize) -> usize {
            let id = nodes.len();
            nodes.push(Node::Leaf { value: 0.0, cover: 0.0 });
            if depth == 0 || rng.random_bool(0.25) {
                nodes[id] = Node::Leaf { value: rng.random_range(-5.0..5.0), cover: rng.random_range(1..20) as f64 };
                return id;
            }
            let feature = rng.random_range(0..nf);
            let threshold = rng.random_range(-1.0..1.0);
            let left = grow(rng, nodes, nf, depth - 1);
            let right = grow(rng, nodes, nf, depth - 1);
            let cover = nodes[left].cover() + nodes[right].cover();
            nodes[id] = Node::Split { feature, threshold, left, right, cover };
            id
        }
        let mut nodes = Vec::new();
        grow(rng, &mut nodes, nf, depth);
        Tree::new(nodes).unwrap()
    }

    #[test]
    fn single_leaf_has_no_attribution() {
        let e = TreeEnsemble::from_tree(Tree::leaf(2.5, 10.0));
        let a = tree_shap(&e, &[1.0, 2.0]).unwrap();
        assert_eq!((a.base_value, a.phi.clone()), (2.5, vec![0.0, 0.0]));
        assert_eq!(brute_shap_oracle(&e, &[1.0, 2.0]).unwrap(), a);
    }

    #[test]
    fn stump_example() {
        let e = TreeEnsemble::from_tree(stump(0.0, 1.0));
        let a = tree_shap(&e, &[1.0, 7.0, -3.0]).unwrap();
        assert!((a.base_value - 0.5).abs() < 1e-12);
        assert!((a.phi[0] - 0.5).abs() < 1e-12);
        assert_eq!(&a.phi[1..], &[0.0, 0.0]);
    }

    #[test]
    fn symmetric_tree_gives_equal_phi() {
        let t = Tree::new(vec![
            Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2, cover: 40.0 },
            Node::Split { feature: 1, threshold: 0.5, left: 3, right: 4, cover: 20.0 },
            Node::Split { feature: 1, threshold: 0.5, left: 5, right: 6, cover: 20.0 },
            Node::Leaf { value: 0.0, cover: 10.0 },
            Node::Leaf { value: 1.0, cover: 10.0 },
            Node::Leaf { value: 1.0, cover: 10.0 },
            Node::Leaf { value: 2.0, cover: 10.0 },
        ])
        .unwrap();
        let a = tree_shap(&TreeEnsemble::from_tree(t), &[1.0, 1.0]).unwrap();
        assert!((a.phi[0] - a.phi[1]).abs() < 1e-12);
        assert!((a.phi[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let nf = rng.random_range(1..=4);
            let n_trees = rng.random_range(1..=3);
            let trees: Vec<Tree> = (0..n_trees).map(|_| {
                let depth = rng.random_range(0..=3);
                random_tree(&mut rng, nf, depth)
            }).collect();
            let e = TreeEnsemble { base_score: rng.random_range(-1.0..1.0), learning_rate: 1.0, trees };
            let x: Vec<f64> = (0..nf).map(|_| rng.random_range(-1.2..1.2)).collect();
            let fast = tree_shap(&e, &x).unwrap();
            let slow = brute_shap_oracle(&e, &x).unwrap();
            assert!((fast.base_value - slow.base_value).abs() < 1e-9);
            for (p, q) in fast.phi.iter().zip(&slow.phi) {
                assert!((p - q).abs() < 1e-9, "{fast:?} vs {slow:?}");
            }
            assert!(fast.local_accuracy_gap() < 1e-9);
            assert!(slow.local_accuracy_gap() < 1e-9);
        }
    }

    #[test]
    fn additivity_and_dummy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t1 = random_tree(&mut rng, 3, 3);
        let t2 = random_tree(&mut rng, 3, 3);
        let x = [0.2, -0.4, 0.9, 123.0];
        let both = tree_shap(&TreeEnsemble { base_score: 0.0, learning_rate: 1.0, trees: vec![t1.clone(), t2.clone()] }, &x).unwrap();
        let a = tree_shap(&TreeEnsemble::from_tree(t1), &x).unwrap();
        let b = tree_shap(&TreeEnsemble::from_tree(t2), &x).unwrap();
        for i in 0..4 {
            assert!((both.phi[i] - a.phi[i] - b.phi[i]).abs() < 1e-12);
        }
        assert_eq!(both.phi[3], 0.0);
    }

    #[test]
    fn local_accuracy_on_fitted_ensembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<Vec<f64>> = (0..150).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * 4.0 - r[3] + (r[1] * 9.0).sin()).collect();
        let e = fit_gbt(&x, &y, &GbtParams { max_depth: 5, n_rounds: 30, ..GbtParams::default() }).unwrap();
        for a in shap_all(&e, &x).unwrap() {
            assert!(a.local_accuracy_gap() < 1e-6);
        }
    }

    #[test]
    fn errors() {
        let bad = Tree::new(vec![
            Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2, cover: 0.0 },
            Node::Leaf { value: 0.0, cover: 0.0 },
            Node::Leaf { value: 1.0, cover: 0.0 },
        ])
        .unwrap();
        assert!(matches!(tree_shap(&TreeEnsemble::from_tree(bad), &[0.0]), Err(Error::Integrity(_))));
        let e = TreeEnsemble::from_tree(stump(0.0, 1.0));
        assert!(matches!(brute_shap_oracle(&e, &[0.0; 13]), Err(Error::Refused(_))));
        assert!(matches!(tree_shap(&TreeEnsemble::from_tree(Tree::new(vec![
            Node::Split { feature: 3, threshold: 0.5, left: 1, right: 2, cover: 2.0 },
            Node::Leaf { value: 0.0, cover: 1.0 },
            Node::Leaf { value: 1.0, cover: 1.0 },
        ]).unwrap()), &[0.0]), Err(Error::Shape(_))));
    }

    fn attr(phi: Vec<f64>) -> Attribution {
        Attribution { base_value: 0.0, phi, prediction: 0.0 }
    }

    #[test]
    fn importance_examples() {
        let r = importance(&[attr(vec![0.0; 3]), attr(vec![0.0; 3])]);
        assert_eq!(r, vec![(0, 0.0), (1, 0.0), (2, 0.0)]);
        let r = importance(&[attr(vec![0.0, -1.0, 0.0]), attr(vec![0.0, 1.0, 0.0])]);
        assert_eq!(r[0], (1, 1.0));
        let r = importance(&[attr(vec![0.3, 0.7]), attr(vec![-0.3, -0.7])]);
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 0]);
        assert_eq!(default_color_feature(&r, 1), Some(0));
        assert_eq!(default_color_feature(&r, 0), Some(1));
    }

    #[test]
    fn dependence_slope_recovers_stump_height() {
        let a = 2.75;
        let e = TreeEnsemble::from_tree(stump(0.0, a));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(0..2) as f64, rng.random::<f64>()]).collect();
        let attrs = shap_all(&e, &x).unwrap();
        let rows = dependence_export(&attrs, &x, 0, Some(1)).unwrap();
        assert_eq!(rows.len(), 40);
        assert!(rows.windows(2).all(|w| w[0].x_f <= w[1].x_f));
        let n = rows.len() as f64;
        let (mx, my) = (rows.iter().map(|r| r.x_f).sum::<f64>() / n, rows.iter().map(|r| r.phi_f).sum::<f64>() / n);
        let sxy: f64 = rows.iter().map(|r| (r.x_f - mx) * (r.phi_f - my)).sum();
        let sxx: f64 = rows.iter().map(|r| (r.x_f - mx).powi(2)).sum();
        assert!((sxy / sxx - a).abs() < 1e-6);
    }

    #[test]
    fn csv_exports() {
        let dir = tempfile::tempdir().unwrap();
        let attrs = vec![Attribution { base_value: 1.0, phi: vec![0.5, -0.25], prediction: 1.25 }];
        let p = dir.path().join("a.csv");
        write_attributions_csv(&p, &["s1".into()], &attrs).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "subject_id,base_value,phi_0,phi_1,prediction\ns1,1,0.5,-0.25,1.25\n");
        let p = dir.path().join("i.csv");
        write_importance_csv(&p, &importance(&attrs), &["mu_0".into(), "mu_1".into()]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "rank,feature,mean_abs_shap\n1,mu_0,0.5\n2,mu_1,0.25\n");
        let p = dir.path().join("d.csv");
        write_dependence_csv(&p, &[DependenceRow { x_f: 1.0, phi_f: 0.5, x_c: 2.0 }]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("x_f,phi_f,x_c\n"));
    }
}
