//! Run configuration, read from a TOML file with one table per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use striavae::cvae::CvaeConfig;
use striavae::evalpipe::{CvParams, ModelLabel};
use striavae::features::KMeansParams;
use striavae::manifold::ManifoldParams;
use striavae::phantom::{CohortParams, FactorRanges, Geometry, ScoreModel, Target};
use striavae::trees::{CartParams, GbtParams};
use striavae::volume::{Dims, PreprocessParams, VolumeFormat};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root seed; stage `i` uses `seed + i`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub input: InputSection,
    pub phantom: PhantomSection,
    pub preprocess: PreprocessParams,
    pub cvae: CvaeSection,
    pub features: KMeansParams,
    pub cv: CvSection,
    pub shap: ShapSection,
    pub manifold: ManifoldParams,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            input: InputSection::default(),
            phantom: PhantomSection::default(),
            preprocess: PreprocessParams::default(),
            cvae: CvaeSection::default(),
            features: KMeansParams::default(),
            cv: CvSection::default(),
            shap: ShapSection::default(),
            manifold: ManifoldParams::default(),
        }
    }
}

/// Existing cohort to ingest instead of generating phantoms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    /// Manifest in the `cohort.csv` layout.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub n: usize,
    pub ranges: FactorRanges,
    pub scores: ScoreModel,
    pub noise_sigma: f64,
    pub dims: Dims,
    pub spacing: [f32; 3],
    pub geometry: Geometry,
    pub format: VolumeFormat,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let c = CohortParams::default();
        Self {
            n: c.n,
            ranges: c.ranges,
            scores: c.scores,
            noise_sigma: c.noise_sigma,
            dims: c.dims,
            spacing: c.spacing,
            geometry: c.geometry,
            format: VolumeFormat::Rawf32,
        }
    }
}

impl PhantomSection {
    pub fn cohort(&self, seed: u64) -> CohortParams {
        CohortParams {
            n: self.n,
            ranges: self.ranges.clone(),
            scores: self.scores.clone(),
            noise_sigma: self.noise_sigma,
            dims: self.dims,
            spacing: self.spacing,
            geometry: self.geometry.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// One model on every subject; latents of all subjects come from it.
    All,
    /// Additionally one model per CV fold, trained on that fold's training
    /// subjects; cross-validation then uses only fold models.
    TrainFolds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeSection {
    pub latent_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub channels: [usize; 4],
    pub hidden: usize,
    pub fit_mode: FitMode,
}

impl Default for CvaeSection {
    fn default() -> Self {
        let c = CvaeConfig::default();
        Self {
            latent_dim: c.latent_dim,
            beta: c.beta,
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            channels: c.channels,
            hidden: c.hidden,
            fit_mode: FitMode::All,
        }
    }
}

impl CvaeSection {
    pub fn model(&self, input_dims: Dims, seed: u64) -> CvaeConfig {
        CvaeConfig {
            latent_dim: self.latent_dim,
            beta: self.beta,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            input_dims,
            seed,
            channels: self.channels,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: usize,
    pub group_by_subject: bool,
    pub targets: Vec<Target>,
    pub models: Vec<ModelLabel>,
    pub cart: CartParams,
    pub gbt: GbtParams,
}

impl Default for CvSection {
    fn default() -> Self {
        let c = CvParams::default();
        Self {
            folds: c.folds,
            group_by_subject: c.group_by_subject,
            targets: Target::ALL.to_vec(),
            models: ModelLabel::ALL.to_vec(),
            cart: c.cart,
            gbt: c.gbt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapSection {
    pub target: Target,
    pub model: ModelLabel,
    /// Dependence feature; the top-ranked one when absent.
    pub feature: Option<usize>,
    pub color: Option<usize>,
}

impl Default for ShapSection {
    fn default() -> Self {
        Self {
            target: Target::UpdrsTotal,
            model: ModelLabel::XgbKmf,
            feature: None,
            color: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let c: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let config = |e: striavae::Error| CliError::Config(e.to_string());
        if self.input.manifest.is_none() {
            self.phantom.cohort(0).validate().map_err(config)?;
        }
        self.cvae.model([16; 3], 0).validate().map_err(config)?;
        if self.cv.folds < 2 {
            return bad(format!("cv.folds must be >= 2, got {}", self.cv.folds));
        }
        self.cv.gbt.validate().map_err(config)?;
        if self.cv.targets.is_empty() || self.cv.models.is_empty() {
            return bad("cv.targets and cv.models must not be empty".into());
        }
        if self.preprocess.downsample == 0 {
            return bad("preprocess.downsample must be >= 1".into());
        }
        if !(0.0..=100.0).contains(&self.preprocess.tau_percentile) {
            return bad(format!("preprocess.tau_percentile {} outside [0, 100]", self.preprocess.tau_percentile));
        }
        let m = &self.manifold;
        if m.grid < 2 || !(m.range[0] < m.range[1]) {
            return bad(format!("manifold grid {} over {:?} is degenerate", m.grid, m.range));
        }
        for f in [m.feat_a, m.feat_b].into_iter().flatten() {
            if f >= self.cvae.latent_dim {
                return bad(format!("manifold feature {f} >= latent_dim {}", self.cvae.latent_dim));
            }
        }
        if m.feat_a.is_some() && m.feat_a == m.feat_b {
            return bad("manifold.feat_a and feat_b must differ".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; any field change alters it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn cv_params(&self, seed: u64) -> CvParams {
        CvParams {
            folds: self.cv.folds,
            seed,
            group_by_subject: self.cv.group_by_subject,
            cart: self.cv.cart.clone(),
            gbt: self.cv.gbt.clone(),
            kmeans: self.features.clone(),
        }
    }
}
