use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_phantom, Geometry, PhantomMasks, PhantomParams};
use crate::error::{Error, Result};
use crate::volume::{save_mask, save_volume, Dims, Volume, VolumeFormat};

/// Regression target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Updrs1,
    Updrs2,
    Updrs3,
    Updrs4,
    UpdrsTotal,
}

impl Target {
    pub const ALL: [Target; 5] = [Target::Updrs1, Target::Updrs2, Target::Updrs3, Target::Updrs4, Target::UpdrsTotal];

    pub fn name(self) -> &'static str {
        match self {
            Target::Updrs1 => "updrs1",
            Target::Updrs2 => "updrs2",
            Target::Updrs3 => "updrs3",
            Target::Updrs4 => "updrs4",
            Target::UpdrsTotal => "updrs_total",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown target {s:?}")))
    }
}

/// Scores of the four parts; the total is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub parts: [f64; 4],
}

impl Scores {
    pub fn total(&self) -> f64 {
        self.parts.iter().sum()
    }

    pub fn get(&self, t: Target) -> f64 {
        match t {
            Target::Updrs1 => self.parts[0],
            Target::Updrs2 => self.parts[1],
            Target::Updrs3 => self.parts[2],
            Target::Updrs4 => self.parts[3],
            Target::UpdrsTotal => self.total(),
        }
    }
}

/// `score = c0 - c1 * a - c2 * r + c3 * s + N(0, noise_sd)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreCoefficients {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub noise_sd: f64,
}

impl ScoreCoefficients {
    pub fn mean(&self, a: f64, r: f64, s: f64) -> f64 {
        self.c0 - self.c1 * a - self.c2 * r + self.c3 * s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreModel {
    pub updrs1: ScoreCoefficients,
    pub updrs2: ScoreCoefficients,
    pub updrs3: ScoreCoefficients,
    pub updrs4: ScoreCoefficients,
}

impl Default for ScoreModel {
    fn default() -> Self {
        let c = |c0, c1, c2, c3, noise_sd| ScoreCoefficients { c0, c1, c2, c3, noise_sd };
        Self {
            updrs1: c(12.0, 1.5, 2.0, 0.05, 1.2),
            updrs2: c(14.0, 2.0, 2.5, 0.05, 1.5),
            updrs3: c(40.0, 7.0, 8.0, 0.15, 4.0),
            updrs4: c(3.0, 0.5, 0.5, 0.02, 0.6),
        }
    }
}

impl ScoreModel {
    pub fn parts(&self) -> [ScoreCoefficients; 4] {
        [self.updrs1, self.updrs2, self.updrs3, self.updrs4]
    }

    pub fn validate(&self) -> Result<()> {
        for c in self.parts() {
            let vals = [c.c0, c.c1, c.c2, c.c3, c.noise_sd];
            if vals.iter().any(|v| !v.is_finite()) || c.noise_sd < 0.0 {
                return Err(Error::Config("score coefficients must be finite, noise_sd >= 0".into()));
            }
        }
        Ok(())
    }

    /// Noise-free scores.
    pub fn expected(&self, a: f64, r: f64, s: f64) -> Scores {
        Scores {
            parts: self.parts().map(|c| c.mean(a, r, s)),
        }
    }

    pub fn sample(&self, a: f64, r: f64, s: f64, rng: &mut impl Rng) -> Scores {
        Scores {
            parts: self.parts().map(|c| {
                let e: f64 = StandardNormal.sample(rng);
                c.mean(a, r, s) + c.noise_sd * e
            }),
        }
    }
}

/// Inclusive `[lo, hi]` ranges of the generative factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorRanges {
    pub amplitude: [f64; 2],
    pub separation: [f64; 2],
    pub ap_ratio: [f64; 2],
}

impl Default for FactorRanges {
    fn default() -> Self {
        Self {
            amplitude: [1.0, 3.5],
            separation: [28.0, 48.0],
            ap_ratio: [0.6, 1.6],
        }
    }
}

fn draw(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortParams {
    pub n: usize,
    pub ranges: FactorRanges,
    pub scores: ScoreModel,
    pub noise_sigma: f64,
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub geometry: Geometry,
    pub seed: u64,
}

impl Default for CohortParams {
    fn default() -> Self {
        let p = PhantomParams::desk();
        Self {
            n: 64,
            ranges: FactorRanges::default(),
            scores: ScoreModel::default(),
            noise_sigma: p.noise_sigma,
            dims: p.dims,
            spacing: p.spacing,
            geometry: p.geometry,
            seed: 0,
        }
    }
}

impl CohortParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("cohort size must be >= 1".into()));
        }
        for (name, r) in [
            ("amplitude", self.ranges.amplitude),
            ("separation", self.ranges.separation),
            ("ap_ratio", self.ranges.ap_ratio),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::Config(format!("{name} range {r:?} is not an interval")));
            }
        }
        self.scores.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubject {
    pub id: String,
    pub volume: Volume,
    pub masks: PhantomMasks,
    pub params: PhantomParams,
    pub scores: Scores,
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{:04}", index + 1)
}

/// Subject `i` draws its factors, score noise and image noise from `seed + i`.
pub fn generate_cohort(p: &CohortParams) -> Result<Vec<SyntheticSubject>> {
    p.validate()?;
    (0..p.n)
        .into_par_iter()
        .map(|i| {
            let seed = p.seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = draw(p.ranges.amplitude, &mut rng);
            let s = draw(p.ranges.separation, &mut rng);
            let r = draw(p.ranges.ap_ratio, &mut rng);
            let scores = p.scores.sample(a, r, s, &mut rng);
            let params = PhantomParams {
                amplitude: a,
                separation: s,
                ap_ratio: r,
                noise_sigma: p.noise_sigma,
                seed: rng.random(),
                dims: p.dims,
                spacing: p.spacing,
                geometry: p.geometry.clone(),
            };
            let ph = generate_phantom(&params)?;
            Ok(SyntheticSubject {
                id: subject_id(i),
                volume: ph.volume,
                masks: ph.masks,
                params,
                scores,
            })
        })
        .collect()
}

/// One line of the cohort manifest. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub volume: PathBuf,
    pub background_mask: PathBuf,
    pub reference_mask: PathBuf,
    pub striatal_mask: PathBuf,
    pub a: f64,
    pub s: f64,
    pub r: f64,
    pub updrs1: f64,
    pub updrs2: f64,
    pub updrs3: f64,
    pub updrs4: f64,
    pub updrs_total: f64,
}

impl ManifestRow {
    pub fn scores(&self) -> Scores {
        Scores {
            parts: [self.updrs1, self.updrs2, self.updrs3, self.updrs4],
        }
    }

    pub fn target(&self, t: Target) -> f64 {
        match t {
            Target::UpdrsTotal => self.updrs_total,
            other => self.scores().get(other),
        }
    }
}

pub const MANIFEST_FILE: &str = "cohort.csv";

/// Write volumes, masks and `cohort.csv` under `dir`; returns the manifest path.
pub fn write_cohort(dir: &Path, subjects: &[SyntheticSubject], format: VolumeFormat) -> Result<PathBuf> {
    for sub in ["volumes", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let ext = format.extension();
    let rows = subjects
        .par_iter()
        .map(|s| {
            let rel = |sub: &str, suffix: &str| PathBuf::from(sub).join(format!("{}{suffix}.{ext}", s.id));
            let row = ManifestRow {
                subject_id: s.id.clone(),
                volume: rel("volumes", ""),
                background_mask: rel("masks", "_background"),
                reference_mask: rel("masks", "_reference"),
                striatal_mask: rel("masks", "_striatal"),
                a: s.params.amplitude,
                s: s.params.separation,
                r: s.params.ap_ratio,
                updrs1: s.scores.parts[0],
                updrs2: s.scores.parts[1],
                updrs3: s.scores.parts[2],
                updrs4: s.scores.parts[3],
                updrs_total: s.scores.total(),
            };
            save_volume(&s.volume, dir.join(&row.volume), format)?;
            save_mask(&s.masks.background, dir.join(&row.background_mask), format)?;
            save_mask(&s.masks.reference, dir.join(&row.reference_mask), format)?;
            save_mask(&s.masks.striatal, dir.join(&row.striatal_mask), format)?;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Read a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let mut row: ManifestRow = rec.map_err(|e| Error::csv(path, e))?;
        for p in [
            &mut row.volume,
            &mut row.background_mask,
            &mut row.reference_mask,
            &mut row.striatal_mask,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if (row.scores().total() - row.updrs_total).abs() > 1e-6 {
            return Err(Error::Integrity(format!(
                "{}: updrs_total differs from the sum of its parts",
                row.subject_id
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: manifest has no subjects", path.display())));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{load_mask, load_volume};

    fn small(n: usize) -> CohortParams {
        CohortParams { n, seed: 5, ..CohortParams::default() }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    fn zero_noise(mut m: ScoreModel) -> ScoreModel {
        for c in [&mut m.updrs1, &mut m.updrs2, &mut m.updrs3, &mut m.updrs4] {
            c.noise_sd = 0.0;
        }
        m
    }

    #[test]
    fn totals_are_sums_and_cohort_is_deterministic() {
        let a = generate_cohort(&small(6)).unwrap();
        let b = generate_cohort(&small(6)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!((s.scores.get(Target::UpdrsTotal) - s.scores.parts.iter().sum::<f64>()).abs() < 1e-9);
            assert!((1.0..=3.5).contains(&s.params.amplitude));
        }
        assert_eq!(a[2].id, "sub-0003");
    }

    #[test]
    fn constant_model_gives_constant_scores() {
        let c = ScoreCoefficients { c0: 7.0, c1: 0.0, c2: 0.0, c3: 0.0, noise_sd: 0.0 };
        let p = CohortParams {
            scores: ScoreModel { updrs1: c, updrs2: c, updrs3: c, updrs4: c },
            ..small(5)
        };
        for s in generate_cohort(&p).unwrap() {
            assert_eq!(s.scores.parts, [7.0; 4]);
        }
    }

    #[test]
    fn amplitude_alone_is_perfectly_anticorrelated_with_total() {
        let p = CohortParams {
            ranges: FactorRanges { separation: [36.0, 36.0], ap_ratio: [1.0, 1.0], ..FactorRanges::default() },
            scores: zero_noise(ScoreModel::default()),
            noise_sigma: 0.0,
            ..small(12)
        };
        let c = generate_cohort(&p).unwrap();
        let a: Vec<f64> = c.iter().map(|s| s.params.amplitude).collect();
        let t: Vec<f64> = c.iter().map(|s| s.scores.total()).collect();
        assert!((pearson(&a, &t) + 1.0).abs() < 1e-9);
    }

    /// Solve a small dense system by Gaussian elimination with partial pivoting.
    fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| m[i][k].abs().total_cmp(&m[j][k].abs())).unwrap();
            m.swap(k, piv);
            b.swap(k, piv);
            for i in k + 1..n {
                let f = m[i][k] / m[k][k];
                for j in k..n {
                    m[i][j] -= f * m[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            x[k] = (b[k] - (k + 1..n).map(|j| m[k][j] * x[j]).sum::<f64>()) / m[k][k];
        }
        x
    }

    #[test]
    fn noise_free_scores_are_exactly_linear() {
        let model = ScoreModel::default();
        let m = zero_noise(model.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<[f64; 4]> = (0..40)
            .map(|_| [1.0, rng.random_range(1.0..3.5), rng.random_range(0.6..1.6), rng.random_range(28.0..48.0)])
            .collect();
        let y: Vec<f64> = rows.iter().map(|x| m.expected(x[1], x[2], x[3]).parts[2]).collect();
        let mut xtx = vec![vec![0.0; 4]; 4];
        let mut xty = vec![0.0; 4];
        for (x, yi) in rows.iter().zip(&y) {
            for i in 0..4 {
                xty[i] += x[i] * yi;
                for j in 0..4 {
                    xtx[i][j] += x[i] * x[j];
                }
            }
        }
        let beta = solve(xtx, xty);
        let c = model.updrs3;
        for (got, want) in beta.iter().zip([c.c0, -c.c1, -c.c2, c.c3]) {
            assert!((got - want).abs() < 1e-8, "{beta:?}");
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_cohort(&small(3)).unwrap();
        let path = write_cohort(dir.path(), &c, VolumeFormat::Nifti1).unwrap();
        let rows = read_manifest(&path).unwrap();
        assert_eq!(rows.len(), 3);
        for (row, s) in rows.iter().zip(&c) {
            assert_eq!(row.subject_id, s.id);
            assert_eq!(load_volume(&row.volume, VolumeFormat::Nifti1).unwrap(), s.volume);
            assert_eq!(load_mask(&row.striatal_mask, VolumeFormat::Nifti1).unwrap(), s.masks.striatal);
            assert_eq!(row.target(Target::Updrs3), s.scores.parts[2]);
            assert!((row.updrs_total - s.scores.total()).abs() < 1e-9);
        }
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(
            "subject_id,volume,background_mask,reference_mask,striatal_mask,a,s,r,updrs1,updrs2,updrs3,updrs4,updrs_total"
        ));
    }

    #[test]
    fn target_names_roundtrip() {
        for t in Target::ALL {
            assert_eq!(t.name().parse::<Target>().unwrap(), t);
        }
        assert!("updrs5".parse::<Target>().is_err());
    }
}
