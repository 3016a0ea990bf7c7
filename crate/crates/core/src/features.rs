//! K-means clustering of latent means and the K-means features (KMF) transform.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cvae::LatentCode;
use crate::error::{Error, Result};

/// `max(8, ceil(8 ln d))`.
pub fn cluster_count(d: usize) -> usize {
    assert!(d >= 1, "latent dimension must be >= 1");
    let rule = (8.0 * (d as f64).ln()).ceil();
    (rule as usize).max(8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub centers: Vec<Vec<f64>>,
    /// Sum of squared distances to the nearest center.
    pub inertia: f64,
    /// Inertia after each assignment step, then for the final centers.
    pub history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Index of the nearest center (lowest index on ties) and its squared distance.
    pub fn nearest(&self, point: &[f64]) -> (usize, f64) {
        nearest(&self.centers, point)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansParams {
    /// Overrides the cluster-count rule.
    pub k: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: None,
            max_iter: 300,
            tol: 1e-8,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centers: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::Shape("points must be non-empty vectors".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("points must be finite".into()));
    }
    Ok(d)
}

/// k-means++ seeding followed by Lloyd iterations until every center moves
/// less than `tol` or `max_iter` passes. An empty cluster is re-seeded at the
/// point farthest from its assigned center.
pub fn fit_kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansModel> {
    let d = check_points(points)?;
    if k == 0 || points.len() < k {
        return Err(Error::Config(format!("k-means needs 1 <= K <= n, got K = {k} with n = {}", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut assign = vec![0usize; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, dist) = nearest(&centers, p);
            assign[i] = c;
            d2[i] = dist;
            inertia += dist;
        }
        history.push(inertia);
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0f64;
        for c in 0..k {
            let new = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let far = (0..points.len()).fold(0, |best, i| if d2[i] > d2[best] { i } else { best });
                d2[far] = 0.0;
                points[far].clone()
            };
            shift = shift.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if shift < tol {
            break;
        }
    }
    let inertia = points.iter().map(|p| nearest(&centers, p).1).sum();
    history.push(inertia);
    Ok(KMeansModel {
        centers,
        inertia,
        history,
        iterations,
    })
}

/// Euclidean distance from `point` to every center.
pub fn kmf_transform(model: &KMeansModel, point: &[f64]) -> Result<Vec<f64>> {
    if point.len() != model.dim() {
        return Err(Error::Shape(format!("point of dim {} for centers of dim {}", point.len(), model.dim())));
    }
    Ok(model.centers.iter().map(|c| sq_dist(c, point).sqrt()).collect())
}

/// Rows of `[mu, kmf]`.
pub fn augment(model: &KMeansModel, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .map(|p| {
            let mut row = p.clone();
            row.extend(kmf_transform(model, p)?);
            Ok(row)
        })
        .collect()
}

/// Per-subject features: latent means and, optionally, KMF distances.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub mu: Vec<Vec<f64>>,
    pub kmf: Option<Vec<Vec<f64>>>,
}

impl FeatureTable {
    pub fn latent_dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    /// Feature rows with or without the KMF block.
    pub fn rows(&self, with_kmf: bool) -> Result<Vec<Vec<f64>>> {
        match (&self.kmf, with_kmf) {
            (_, false) => Ok(self.mu.clone()),
            (Some(kmf), true) => Ok(self.mu.iter().zip(kmf).map(|(m, f)| [m.as_slice(), f].concat()).collect()),
            (None, true) => Err(Error::Parameter("feature table has no KMF columns".into())),
        }
    }

    pub fn column_names(&self, with_kmf: bool) -> Vec<String> {
        let mut names: Vec<String> = (0..self.latent_dim()).map(|i| format!("mu_{i}")).collect();
        if with_kmf {
            if let Some(k) = self.kmf.as_ref().and_then(|f| f.first()) {
                names.extend((0..k.len()).map(|i| format!("kmf_{i}")));
            }
        }
        names
    }
}

fn write_table(path: &Path, header: Vec<String>, rows: impl Iterator<Item = (String, Vec<f64>)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (id, vals) in rows {
        let rec = std::iter::once(id).chain(vals.iter().map(|v| v.to_string()));
        w.write_record(rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| Error::csv(path, e))?.iter().map(str::to_owned).collect();
    if header.first().map(String::as_str) != Some("subject_id") {
        return Err(Error::Format(format!("{}: first column must be subject_id", path.display())));
    }
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        ids.push(rec[0].to_owned());
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        rows.push(vals);
    }
    Ok((header[1..].to_vec(), ids, rows))
}

/// `subject_id, mu_0.., kmf_0..`.
pub fn write_features_csv(path: &Path, table: &FeatureTable) -> Result<()> {
    let with_kmf = table.kmf.is_some();
    let header = std::iter::once("subject_id".to_owned()).chain(table.column_names(with_kmf)).collect();
    let rows = table.rows(with_kmf)?;
    write_table(path, header, table.ids.iter().cloned().zip(rows))
}

pub fn read_features_csv(path: &Path) -> Result<FeatureTable> {
    let (cols, ids, rows) = read_table(path)?;
    let d = cols.iter().take_while(|c| c.starts_with("mu_")).count();
    let k = cols.len() - d;
    if d == 0 || cols[d..].iter().any(|c| !c.starts_with("kmf_")) {
        return Err(Error::Format(format!("{}: expected mu_* then kmf_* columns", path.display())));
    }
    let mu = rows.iter().map(|r| r[..d].to_vec()).collect();
    let kmf = (k > 0).then(|| rows.iter().map(|r| r[d..].to_vec()).collect());
    Ok(FeatureTable { ids, mu, kmf })
}

/// `subject_id, mu_0.., logvar_0..`.
pub fn write_latents_csv(path: &Path, ids: &[String], codes: &[LatentCode]) -> Result<()> {
    let d = codes.first().map_or(0, LatentCode::dim);
    let header = std::iter::once("subject_id".to_owned())
        .chain((0..d).map(|i| format!("mu_{i}")))
        .chain((0..d).map(|i| format!("logvar_{i}")))
        .collect();
    let rows = ids.iter().cloned().zip(codes.iter().map(|c| [c.mu.as_slice(), &c.logvar].concat()));
    write_table(path, header, rows)
}

pub fn read_latents_csv(path: &Path) -> Result<(Vec<String>, Vec<LatentCode>)> {
    let (cols, ids, rows) = read_table(path)?;
    let d = cols.len() / 2;
    let names_ok = cols.len() % 2 == 0
        && d > 0
        && (0..d).all(|i| cols[i] == format!("mu_{i}") && cols[d + i] == format!("logvar_{i}"));
    if !names_ok {
        return Err(Error::Format(format!("{}: expected mu_* and logvar_* columns", path.display())));
    }
    let codes = rows
        .into_iter()
        .map(|r| LatentCode::new(r[..d].to_vec(), r[d..].to_vec()))
        .collect::<Result<_>>()?;
    Ok((ids, codes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    #[test]
    fn cluster_count_rule() {
        assert_eq!(cluster_count(1), 8);
        assert_eq!(cluster_count(3), 9);
        assert_eq!(cluster_count(8), 17);
        assert_eq!(cluster_count(20), 24);
        let mut prev = 0;
        for d in 1..500 {
            let k = cluster_count(d);
            assert!(k >= prev);
            prev = k;
        }
    }

    /// Best 2-partition of sorted 1-D points by brute force.
    fn brute_two_means(xs: &[f64]) -> (f64, f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for mask in 1..(1u32 << xs.len()) - 1 {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let mut a = vec![];
                let mut b = vec![];
                for (i, &x) in xs.iter().enumerate() {
                    if mask >> i & 1 == 1 { a.push(x) } else { b.push(x) }
                }
                (a, b)
            };
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (ma, mb) = (m(&a), m(&b));
            let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if cost < best.0 {
                best = (cost, ma.min(mb), ma.max(mb));
            }
        }
        best
    }

    #[test]
    fn two_clusters_in_one_dimension() {
        let xs = [0.0, 0.1, 10.0, 10.1];
        let (cost, lo, hi) = brute_two_means(&xs);
        let pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let m = fit_kmeans(&pts, 2, 0, 100, 1e-10).unwrap();
        let mut c: Vec<f64> = m.centers.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - lo).abs() < 1e-12 && (c[1] - hi).abs() < 1e-12);
        assert!((m.inertia - cost).abs() < 1e-12);
        assert!((m.inertia - 0.01).abs() < 1e-9);
        assert!((c[0] - 0.05).abs() < 1e-12 && (c[1] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn k_points_k_clusters() {
        let pts = vec![vec![1.0, 2.0], vec![-3.0, 0.5], vec![4.0, 4.0]];
        let m = fit_kmeans(&pts, 3, 7, 50, 1e-12).unwrap();
        assert_eq!(m.inertia, 0.0);
        for p in &pts {
            assert!(m.centers.contains(p));
        }
        assert!(matches!(fit_kmeans(&pts, 4, 0, 10, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random::<f64>(), rng.random::<f64>() * 3.0]).collect();
        let a = fit_kmeans(&pts, 9, 1, 100, 1e-12).unwrap();
        assert_eq!(a, fit_kmeans(&pts, 9, 1, 100, 1e-12).unwrap());
        for w in a.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn duplicate_points_reseed_empty_clusters() {
        let pts = vec![vec![0.0], vec![0.0], vec![0.0], vec![5.0]];
        let m = fit_kmeans(&pts, 3, 0, 20, 1e-12).unwrap();
        assert!(m.centers.iter().all(|c| c[0].is_finite()));
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn kmf_examples() {
        let m = KMeansModel { centers: vec![vec![0.0, 0.0], vec![3.0, 4.0]], inertia: 0.0, history: vec![], iterations: 0 };
        assert_eq!(kmf_transform(&m, &[0.0, 0.0]).unwrap(), vec![0.0, 5.0]);
        assert_eq!(kmf_transform(&m, &[3.0, 4.0]).unwrap()[1], 0.0);
        assert!(matches!(kmf_transform(&m, &[1.0]), Err(Error::Shape(_))));
        assert_eq!(augment(&m, &[vec![0.0, 0.0]]).unwrap(), vec![vec![0.0, 0.0, 0.0, 5.0]]);
    }

    #[test]
    fn csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let t = FeatureTable {
            ids: vec!["a".into(), "b".into()],
            mu: vec![vec![0.5, -1.25], vec![2.0, 0.1]],
            kmf: Some(vec![vec![1.0; 3], vec![0.3; 3]]),
        };
        let p = dir.path().join("f.csv");
        write_features_csv(&p, &t).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("subject_id,mu_0,mu_1,kmf_0,kmf_1,kmf_2\n"));
        assert_eq!(read_features_csv(&p).unwrap(), t);
        let codes = vec![LatentCode::new(vec![0.1, 0.2], vec![-0.3, 0.0]).unwrap()];
        let q = dir.path().join("l.csv");
        write_latents_csv(&q, &["x".into()], &codes).unwrap();
        assert_eq!(read_latents_csv(&q).unwrap(), (vec!["x".to_owned()], codes));
    }

    proptest! {
        #[test]
        fn kmf_is_nonnegative_and_respects_triangle_inequality(
            centers in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..6),
            p in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let m = KMeansModel { centers: centers.clone(), inertia: 0.0, history: vec![], iterations: 0 };
            let f = kmf_transform(&m, &p).unwrap();
            for i in 0..f.len() {
                prop_assert!(f[i] >= 0.0);
                for j in 0..f.len() {
                    prop_assert!((f[i] - f[j]).abs() <= sq_dist(&centers[i], &centers[j]).sqrt() + 1e-9);
                }
            }
        }

        #[test]
        fn inertia_never_increases(seed in 0u64..1000, n in 10usize..60, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let m = fit_kmeans(&pts, k, seed, 100, 0.0).unwrap();
            for w in m.history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
        }
    }
}
