//! Cross-validated regression of symptom scores from latent features.
//!
//! Folds split subjects. Inside every fold the K-means model and the
//! regressor see training rows only; metrics are computed once over the
//! pooled held-out predictions.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{augment, cluster_count, fit_kmeans, KMeansModel, KMeansParams};
use crate::trees::{fit_cart, fit_gbt, CartParams, GbtParams, TreeEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

/// MAE, RMSE and R². A constant `y` yields [`Error::UndefinedR2`] carrying
/// the other two.
pub fn metrics(y: &[f64], yhat: &[f64]) -> Result<Metrics> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::Shape(format!("{} targets and {} predictions", y.len(), yhat.len())));
    }
    let n = y.len() as f64;
    let mae = y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    let rmse = (ss_res / n).sqrt();
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedR2 { mae, rmse });
    }
    Ok(Metrics {
        mae,
        rmse,
        r2: 1.0 - ss_res / ss_tot,
    })
}

/// Seeded shuffle of `0..n`, cut into `k` contiguous chunks; the first
/// `n % k` chunks get one extra index.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::Config(format!("cannot split {n} items into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelLabel {
    #[serde(rename = "DT")]
    Dt,
    #[serde(rename = "DT(KMF)")]
    DtKmf,
    #[serde(rename = "XGB")]
    Xgb,
    #[serde(rename = "XGB(KMF)")]
    XgbKmf,
}

impl ModelLabel {
    pub const ALL: [ModelLabel; 4] = [ModelLabel::Dt, ModelLabel::DtKmf, ModelLabel::Xgb, ModelLabel::XgbKmf];

    pub fn label(self) -> &'static str {
        match self {
            ModelLabel::Dt => "DT",
            ModelLabel::DtKmf => "DT(KMF)",
            ModelLabel::Xgb => "XGB",
            ModelLabel::XgbKmf => "XGB(KMF)",
        }
    }

    pub fn uses_kmf(self) -> bool {
        matches!(self, ModelLabel::DtKmf | ModelLabel::XgbKmf)
    }

    pub fn boosted(self) -> bool {
        matches!(self, ModelLabel::Xgb | ModelLabel::XgbKmf)
    }
}

impl fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelLabel::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvParams {
    pub folds: usize,
    pub seed: u64,
    /// Keep all rows of a subject in one fold; otherwise rows split freely.
    pub group_by_subject: bool,
    pub cart: CartParams,
    pub gbt: GbtParams,
    pub kmeans: KMeansParams,
}

impl Default for CvParams {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 0,
            group_by_subject: true,
            cart: CartParams::default(),
            gbt: GbtParams::default(),
            kmeans: KMeansParams::default(),
        }
    }
}

/// Regressor plus the K-means model feeding it, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub label: ModelLabel,
    pub kmeans: Option<KMeansModel>,
    pub ensemble: TreeEnsemble,
}

impl FittedModel {
    /// Regressor input for latent rows: the rows themselves, or rows with KMF appended.
    pub fn design(&self, mu: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match &self.kmeans {
            Some(km) => augment(km, mu),
            None => Ok(mu.to_vec()),
        }
    }

    pub fn predict(&self, mu: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.ensemble.predict_all(&self.design(mu)?))
    }
}

/// Fit `label` on all given rows.
pub fn fit_model(label: ModelLabel, mu: &[Vec<f64>], y: &[f64], params: &CvParams) -> Result<FittedModel> {
    let d = mu.first().map_or(0, Vec::len);
    let kmeans = if label.uses_kmf() {
        let k = params.kmeans.k.unwrap_or_else(|| cluster_count(d.max(1)));
        Some(fit_kmeans(mu, k, params.seed, params.kmeans.max_iter, params.kmeans.tol)?)
    } else {
        None
    };
    let x = match &kmeans {
        Some(km) => augment(km, mu)?,
        None => mu.to_vec(),
    };
    let ensemble = if label.boosted() {
        fit_gbt(&x, y, &params.gbt)?
    } else {
        TreeEnsemble::from_tree(fit_cart(&x, y, &params.cart)?)
    };
    Ok(FittedModel { label, kmeans, ensemble })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// NaN when the held-out targets are constant.
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub target: String,
    pub d: usize,
    pub model: ModelLabel,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub folds: Vec<FoldMetrics>,
    /// Held-out prediction of every row, in input order.
    pub predictions: Vec<f64>,
}

/// Row folds: subjects (or rows) are sorted by key before the seeded split,
/// so the result does not depend on row order.
fn row_folds(ids: &[String], params: &CvParams) -> Result<Vec<Vec<usize>>> {
    let keys: Vec<String> = if params.group_by_subject {
        ids.to_vec()
    } else {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        ids.iter()
            .map(|id| {
                let c = seen.entry(id).or_default();
                *c += 1;
                format!("{id}#{c}")
            })
            .collect()
    };
    let groups: Vec<&String> = {
        let mut g: Vec<&String> = keys.iter().collect();
        g.sort();
        g.dedup();
        g
    };
    let group_folds = kfold_split(groups.len(), params.folds, params.seed)?;
    let mut fold_of = BTreeMap::new();
    for (f, members) in group_folds.iter().enumerate() {
        for &g in members {
            fold_of.insert(groups[g].as_str(), f);
        }
    }
    let mut folds = vec![Vec::new(); params.folds];
    // canonical order: by key, then by input position
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
    for i in order {
        folds[fold_of[keys[i].as_str()]].push(i);
    }
    Ok(folds)
}

/// K-fold cross-validation of one model on one target.
pub fn run_cv(
    ids: &[String],
    mu: &[Vec<f64>],
    y: &[f64],
    target: &str,
    label: ModelLabel,
    params: &CvParams,
) -> Result<CvReport> {
    if ids.len() != mu.len() || mu.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} ids, {} feature rows and {} targets",
            ids.len(),
            mu.len(),
            y.len()
        )));
    }
    let folds = row_folds(ids, params)?;
    let results: Vec<(Vec<usize>, Vec<f64>)> = (0..folds.len())
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.iter().copied()).collect();
            let mut train = train;
            train.sort_by(|&a, &b| ids[a].cmp(&ids[b]).then(a.cmp(&b)));
            let tx: Vec<Vec<f64>> = train.iter().map(|&i| mu[i].clone()).collect();
            let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let model = fit_model(label, &tx, &ty, params)?;
            let hx: Vec<Vec<f64>> = folds[f].iter().map(|&i| mu[i].clone()).collect();
            Ok((folds[f].clone(), model.predict(&hx)?))
        })
        .collect::<Result<_>>()?;
    let mut predictions = vec![f64::NAN; y.len()];
    let mut fold_metrics = Vec::with_capacity(results.len());
    for (f, (rows, pred)) in results.iter().enumerate() {
        let ty: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let m = match metrics(&ty, pred) {
            Ok(m) => m,
            Err(Error::UndefinedR2 { mae, rmse }) => Metrics { mae, rmse, r2: f64::NAN },
            Err(e) => return Err(e),
        };
        fold_metrics.push(FoldMetrics {
            fold: f,
            n: rows.len(),
            mae: m.mae,
            rmse: m.rmse,
            r2: m.r2,
        });
        for (&i, &p) in rows.iter().zip(pred) {
            predictions[i] = p;
        }
    }
    let pooled = metrics(y, &predictions)?;
    Ok(CvReport {
        target: target.to_owned(),
        d: mu.first().map_or(0, Vec::len),
        model: label,
        mae: pooled.mae,
        rmse: pooled.rmse,
        r2: pooled.r2,
        folds: fold_metrics,
        predictions,
    })
}

/// Best report per `(target, d)`: highest R², then lower RMSE, then label order.
pub fn best_of(reports: &[CvReport]) -> Vec<CvReport> {
    let mut best: BTreeMap<(String, usize), &CvReport> = BTreeMap::new();
    for r in reports {
        let key = (r.target.clone(), r.d);
        let better = match best.get(&key) {
            None => true,
            Some(b) => r
                .r2
                .total_cmp(&b.r2)
                .then(b.rmse.total_cmp(&r.rmse))
                .then(b.model.cmp(&r.model))
                .is_gt(),
        };
        if better {
            best.insert(key, r);
        }
    }
    best.into_values().cloned().collect()
}

/// `target, d, model, MAE, RMSE, R2` with three decimals.
pub fn write_report_csv(path: &Path, reports: &[CvReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["target", "d", "model", "MAE", "RMSE", "R2"]).map_err(|e| Error::csv(path, e))?;
    for r in reports {
        w.write_record([
            r.target.clone(),
            r.d.to_string(),
            r.model.to_string(),
            format!("{:.3}", r.mae),
            format!("{:.3}", r.rmse),
            format!("{:.3}", r.r2),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line per report and fold.
pub fn write_folds_csv(path: &Path, reports: &[CvReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["target", "d", "model", "fold", "n", "MAE", "RMSE", "R2"]).map_err(|e| Error::csv(path, e))?;
    for r in reports {
        for f in &r.folds {
            w.write_record([
                r.target.clone(),
                r.d.to_string(),
                r.model.to_string(),
                f.fold.to_string(),
                f.n.to_string(),
                format!("{:.6}", f.mae),
                format!("{:.6}", f.rmse),
                format!("{:.6}", f.r2),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
