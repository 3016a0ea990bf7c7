//! Pipeline stages. Each stage reads the previous stages' files under the run
//! directory and writes its own into `<out_dir>/<stage>/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use striavae::cvae::{train_with, Cvae, LatentCode};
use striavae::evalpipe::{
    best_of, fit_model, kfold_split, metrics, run_cv, write_folds_csv, write_report_csv, CvParams, CvReport,
    FittedModel, FoldMetrics, Metrics, ModelLabel,
};
use striavae::explain::{
    dependence_export, importance, shap_all, write_attributions_csv, write_dependence_csv, write_importance_csv,
};
use striavae::features::{
    augment, cluster_count, fit_kmeans, read_latents_csv, write_features_csv, write_latents_csv, FeatureTable,
};
use striavae::manifold::{
    consensus_mask, decode_grid, dominant_axis, monotone_fraction, montage, tile_means, write_tile_means_csv,
    GridAxis,
};
use striavae::phantom::{generate_cohort, read_manifest, write_cohort, Target, MANIFEST_FILE};
use striavae::volume::{
    crop_pad_mask, downsample_mask, load_mask, load_volume, preprocess, save_mask, save_volume, Mask, Volume,
    VolumeFormat,
};
use striavae::Error;

use crate::config::{Config, FitMode};
use crate::error::{CliError, CliResult};
use crate::manifest::{digest_outputs, RunManifest, StageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Stage {
    PhantomGen,
    Preprocess,
    Train,
    Encode,
    Features,
    Regress,
    Cv,
    Shap,
    Manifold,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::PhantomGen,
        Stage::Preprocess,
        Stage::Train,
        Stage::Encode,
        Stage::Features,
        Stage::Regress,
        Stage::Cv,
        Stage::Shap,
        Stage::Manifold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PhantomGen => "phantom-gen",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Encode => "encode",
            Stage::Features => "features",
            Stage::Regress => "regress",
            Stage::Cv => "cv",
            Stage::Shap => "shap",
            Stage::Manifold => "manifold",
        }
    }

    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).expect("listed")
    }
}

/// Per-subject row written by the preprocess stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject_id: String,
    /// Relative to the preprocess directory.
    pub volume: PathBuf,
    pub updrs1: f64,
    pub updrs2: f64,
    pub updrs3: f64,
    pub updrs4: f64,
    pub updrs_total: f64,
}

impl SubjectRow {
    pub fn target(&self, t: Target) -> f64 {
        match t {
            Target::Updrs1 => self.updrs1,
            Target::Updrs2 => self.updrs2,
            Target::Updrs3 => self.updrs3,
            Target::Updrs4 => self.updrs4,
            Target::UpdrsTotal => self.updrs_total,
        }
    }
}

pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const CONSENSUS_MASK: &str = "striatal_consensus.vol";
pub const LATENTS_FILE: &str = "latents.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Executes stages for one config and keeps the run manifest current.
pub struct Runner {
    config: Config,
    hash: String,
    progress: Box<dyn Fn(&str) + Send + Sync>,
}

impl Runner {
    pub fn new(config: Config) -> Self {
        let hash = config.hash();
        Self {
            config,
            hash,
            progress: Box::new(|_| {}),
        }
    }

    pub fn with_progress(mut self, f: impl Fn(&str) + Send + Sync + 'static) -> Self {
        self.progress = Box::new(f);
        self
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.config.out_dir.join(stage.name())
    }

    pub fn seed(&self, stage: Stage) -> u64 {
        self.config.seed.wrapping_add(stage.index() as u64)
    }

    fn say(&self, msg: &str) {
        (self.progress)(msg)
    }

    /// Every stage in order.
    pub fn run_pipeline(&self) -> CliResult<RunManifest> {
        for stage in Stage::ALL {
            self.run(stage)?;
        }
        RunManifest::read(self.out_dir())
    }

    /// Run one stage; failures are recorded in the manifest and returned
    /// with the stage name. Outputs written before the failure stay on disk.
    pub fn run(&self, stage: Stage) -> CliResult<StageRecord> {
        let out = self.out_dir();
        let wrap = |e: CliError| CliError::Stage {
            stage: stage.name(),
            source: Box::new(e),
        };
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e).into()))?;
        let config_path = out.join("config.json");
        let json = serde_json::to_vec_pretty(&self.config).expect("config serializes");
        fs::write(&config_path, json).map_err(|e| wrap(Error::io(&config_path, e).into()))?;
        self.say(&format!("[{}] start (seed {})", stage.name(), self.seed(stage)));
        let start = Instant::now();
        let result = match stage {
            Stage::PhantomGen => self.phantom_gen(&dir),
            Stage::Preprocess => self.preprocess(&dir),
            Stage::Train => self.train(&dir),
            Stage::Encode => self.encode(&dir),
            Stage::Features => self.features(&dir),
            Stage::Regress => self.regress(&dir),
            Stage::Cv => self.cv(&dir),
            Stage::Shap => self.shap(&dir),
            Stage::Manifold => self.manifold(&dir),
        };
        let wall_ms = start.elapsed().as_millis() as u64;
        let mut manifest = RunManifest::open(out, &self.hash, self.config.seed);
        let outputs = digest_outputs(out, &dir).unwrap_or_default();
        let rec = StageRecord {
            stage: stage.name().into(),
            index: stage.index(),
            seed: self.seed(stage),
            wall_ms,
            ok: result.is_ok(),
            error: result.as_ref().err().map(|e| e.to_string()),
            outputs,
        };
        manifest.record(rec.clone());
        manifest.save(out).map_err(wrap)?;
        result.map_err(wrap)?;
        self.say(&format!("[{}] done in {:.1} s", stage.name(), wall_ms as f64 / 1000.0));
        Ok(rec)
    }

    fn manifest_path(&self) -> PathBuf {
        match &self.config.input.manifest {
            Some(p) => p.clone(),
            None => self.stage_dir(Stage::PhantomGen).join(MANIFEST_FILE),
        }
    }

    fn phantom_gen(&self, dir: &Path) -> CliResult<()> {
        if let Some(path) = &self.config.input.manifest {
            let rows = read_manifest(path)?;
            self.say(&format!("ingesting {} subjects from {}", rows.len(), path.display()));
            return Ok(());
        }
        let p = self.config.phantom.cohort(self.seed(Stage::PhantomGen));
        let subjects = generate_cohort(&p)?;
        write_cohort(dir, &subjects, self.config.phantom.format)?;
        self.say(&format!("wrote {} phantoms", subjects.len()));
        Ok(())
    }

    fn preprocess(&self, dir: &Path) -> CliResult<()> {
        let rows = read_manifest(&self.manifest_path())?;
        let p = &self.config.preprocess;
        let vol_dir = dir.join("volumes");
        fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
        let done = rows
            .par_iter()
            .map(|row| -> striavae::Result<(SubjectRow, Mask)> {
                let v = load_volume(&row.volume, VolumeFormat::from_path(&row.volume))?;
                let bg = load_mask(&row.background_mask, VolumeFormat::from_path(&row.background_mask))?;
                let rf = load_mask(&row.reference_mask, VolumeFormat::from_path(&row.reference_mask))?;
                let st = load_mask(&row.striatal_mask, VolumeFormat::from_path(&row.striatal_mask))?;
                let out = preprocess(&v, &bg, &rf, p)?;
                let st = match p.target_dims {
                    Some(t) => crop_pad_mask(&st, t)?,
                    None => st,
                };
                let st = downsample_mask(&st, p.downsample)?;
                let rel = PathBuf::from("volumes").join(format!("{}.vol", row.subject_id));
                save_volume(&out, dir.join(&rel), VolumeFormat::Rawf32)?;
                let s = row.scores();
                Ok((
                    SubjectRow {
                        subject_id: row.subject_id.clone(),
                        volume: rel,
                        updrs1: s.parts[0],
                        updrs2: s.parts[1],
                        updrs3: s.parts[2],
                        updrs4: s.parts[3],
                        updrs_total: row.updrs_total,
                    },
                    st,
                ))
            })
            .collect::<striavae::Result<Vec<_>>>()?;
        let masks: Vec<&Mask> = done.iter().map(|d| &d.1).collect();
        let consensus = consensus_mask(&masks)?;
        save_mask(&consensus, dir.join(CONSENSUS_MASK), VolumeFormat::Rawf32)?;
        let path = dir.join(SUBJECTS_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        for (row, _) in &done {
            w.serialize(row).map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn subjects(&self) -> CliResult<Vec<SubjectRow>> {
        let path = self.stage_dir(Stage::Preprocess).join(SUBJECTS_FILE);
        let mut r = csv::Reader::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        let rows = r
            .deserialize()
            .collect::<Result<Vec<SubjectRow>, _>>()
            .map_err(|e| Error::csv(&path, e))?;
        if rows.is_empty() {
            return Err(Error::Format(format!("{}: no subjects", path.display())).into());
        }
        Ok(rows)
    }

    fn volumes(&self, rows: &[SubjectRow]) -> CliResult<Vec<Volume>> {
        let base = self.stage_dir(Stage::Preprocess);
        Ok(rows
            .par_iter()
            .map(|r| load_volume(base.join(&r.volume), VolumeFormat::Rawf32))
            .collect::<striavae::Result<Vec<_>>>()?)
    }

    /// Subject folds shared by per-fold training and cross-validation.
    fn subject_folds(&self, ids: &[String]) -> CliResult<Vec<Vec<usize>>> {
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]).then(a.cmp(&b)));
        let folds = kfold_split(ids.len(), self.config.cv.folds, self.seed(Stage::Cv))?;
        Ok(folds.into_iter().map(|f| f.into_iter().map(|i| order[i]).collect()).collect())
    }

    fn fit_cvae(&self, vols: &[Volume], dir: &Path, tag: &str) -> CliResult<Cvae<f32>> {
        let config = self.config.cvae.model(vols[0].dims(), self.seed(Stage::Train));
        let epochs = config.epochs;
        let (model, log) = train_with(&config, vols, Some(&dir.join("model")), |e| {
            if e.epoch == 1 || e.epoch == epochs || e.epoch % 10 == 0 {
                self.say(&format!(
                    "{tag}epoch {}/{epochs}: recon {:.3} kld {:.3} total {:.3}",
                    e.epoch, e.recon, e.kld, e.total
                ));
            }
        })?;
        log.write_csv(&dir.join("train_log.csv"))?;
        Ok(model)
    }

    fn train(&self, dir: &Path) -> CliResult<()> {
        let rows = self.subjects()?;
        let vols = self.volumes(&rows)?;
        self.fit_cvae(&vols, dir, "")?;
        if self.config.cvae.fit_mode == FitMode::TrainFolds {
            let ids: Vec<String> = rows.iter().map(|r| r.subject_id.clone()).collect();
            for (f, held) in self.subject_folds(&ids)?.iter().enumerate() {
                let train: Vec<Volume> = (0..vols.len()).filter(|i| !held.contains(i)).map(|i| vols[i].clone()).collect();
                let fdir = dir.join("folds").join(format!("fold_{f}"));
                fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
                self.fit_cvae(&train, &fdir, &format!("fold {f} "))?;
            }
        }
        Ok(())
    }

    fn encode(&self, dir: &Path) -> CliResult<()> {
        let rows = self.subjects()?;
        let vols = self.volumes(&rows)?;
        let refs: Vec<&Volume> = vols.iter().collect();
        let ids: Vec<String> = rows.iter().map(|r| r.subject_id.clone()).collect();
        let train_dir = self.stage_dir(Stage::Train);
        let (model, _) = Cvae::<f32>::load(&train_dir.join("model"))?;
        write_latents_csv(&dir.join(LATENTS_FILE), &ids, &model.encode_all(&refs, 16)?)?;
        if self.config.cvae.fit_mode == FitMode::TrainFolds {
            let fdir = dir.join("folds");
            fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
            for f in 0..self.config.cv.folds {
                let (model, _) = Cvae::<f32>::load(&train_dir.join("folds").join(format!("fold_{f}")).join("model"))?;
                write_latents_csv(&fdir.join(format!("latents_fold_{f}.csv")), &ids, &model.encode_all(&refs, 16)?)?;
            }
        }
        Ok(())
    }

    /// Latent means aligned with the subject table.
    fn latents_from(&self, path: &Path, rows: &[SubjectRow]) -> CliResult<Vec<Vec<f64>>> {
        let (ids, codes) = read_latents_csv(path)?;
        if ids.len() != rows.len() || ids.iter().zip(rows).any(|(i, r)| *i != r.subject_id) {
            return Err(Error::Integrity(format!("{}: subjects differ from the preprocessed cohort", path.display())).into());
        }
        Ok(codes.into_iter().map(|c: LatentCode| c.mu).collect())
    }

    fn latents(&self, rows: &[SubjectRow]) -> CliResult<Vec<Vec<f64>>> {
        self.latents_from(&self.stage_dir(Stage::Encode).join(LATENTS_FILE), rows)
    }

    fn features(&self, dir: &Path) -> CliResult<()> {
        let rows = self.subjects()?;
        let mu = self.latents(&rows)?;
        let p = &self.config.features;
        let k = p.k.unwrap_or_else(|| cluster_count(mu[0].len()));
        let km = fit_kmeans(&mu, k, self.seed(Stage::Features), p.max_iter, p.tol)?;
        let kmf = augment(&km, &mu)?.into_iter().map(|r| r[mu[0].len()..].to_vec()).collect();
        let table = FeatureTable {
            ids: rows.iter().map(|r| r.subject_id.clone()).collect(),
            mu,
            kmf: Some(kmf),
        };
        write_features_csv(&dir.join("features.csv"), &table)?;
        write_json(&dir.join("kmeans.json"), &km)
    }

    fn model_file(target: Target, label: ModelLabel) -> String {
        let tag: String = label
            .label()
            .chars()
            .filter_map(|c| match c {
                '(' => Some('_'),
                ')' => None,
                c => Some(c.to_ascii_lowercase()),
            })
            .collect();
        format!("{}__{tag}.json", target.name())
    }

    fn regress(&self, dir: &Path) -> CliResult<()> {
        let rows = self.subjects()?;
        let mu = self.latents(&rows)?;
        let params = self.config.cv_params(self.seed(Stage::Regress));
        for &t in &self.config.cv.targets {
            let y: Vec<f64> = rows.iter().map(|r| r.target(t)).collect();
            for &label in &self.config.cv.models {
                let m = fit_model(label, &mu, &y, &params)?;
                write_json(&dir.join(Self::model_file(t, label)), &m)?;
            }
        }
        Ok(())
    }

    fn cv(&self, dir: &Path) -> CliResult<()> {
        let rows = self.subjects()?;
        let ids: Vec<String> = rows.iter().map(|r| r.subject_id.clone()).collect();
        let params = self.config.cv_params(self.seed(Stage::Cv));
        let fold_mu = match self.config.cvae.fit_mode {
            FitMode::All => None,
            FitMode::TrainFolds => {
                let base = self.stage_dir(Stage::Encode).join("folds");
                let mus = (0..params.folds)
                    .map(|f| self.latents_from(&base.join(format!("latents_fold_{f}.csv")), &rows))
                    .collect::<CliResult<Vec<_>>>()?;
                Some((self.subject_folds(&ids)?, mus))
            }
        };
        let mu = self.latents(&rows)?;
        let mut reports = Vec::new();
        for &t in &self.config.cv.targets {
            let y: Vec<f64> = rows.iter().map(|r| r.target(t)).collect();
            for &label in &self.config.cv.models {
                let r = match &fold_mu {
                    None => run_cv(&ids, &mu, &y, t.name(), label, &params)?,
                    Some((folds, mus)) => fold_model_cv(&ids, folds, mus, &y, t.name(), label, &params)?,
                };
                self.say(&format!("{} {}: MAE {:.3} RMSE {:.3} R2 {:.3}", t, label, r.mae, r.rmse, r.r2));
                reports.push(r);
            }
        }
        write_report_csv(&dir.join(METRICS_FILE), &reports)?;
        write_report_csv(&dir.join("best.csv"), &best_of(&reports))?;
        write_folds_csv(&dir.join("folds.csv"), &reports)?;
        let path = dir.join("predictions.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["subject_id", "target", "model", "y", "prediction"]).map_err(|e| Error::csv(&path, e))?;
        for r in &reports {
            for (row, p) in rows.iter().zip(&r.predictions) {
                let y = row.target(r.target.parse()?);
                w.write_record([row.subject_id.clone(), r.target.clone(), r.model.to_string(), y.to_string(), p.to_string()])
                    .map_err(|e| Error::csv(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn shap(&self, dir: &Path) -> CliResult<()> {
        let rows = self.subjects()?;
        let mu = self.latents(&rows)?;
        let s = &self.config.shap;
        let path = self.stage_dir(Stage::Regress).join(Self::model_file(s.target, s.model));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let model: FittedModel =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let x = model.design(&mu)?;
        let attrs = shap_all(&model.ensemble, &x)?;
        let gap = attrs.iter().map(|a| a.local_accuracy_gap()).fold(0.0, f64::max);
        if gap > 1e-6 {
            return Err(Error::Contract(format!("SHAP local accuracy gap {gap:e}")).into());
        }
        let d = mu[0].len();
        let names: Vec<String> = (0..x[0].len())
            .map(|i| if i < d { format!("mu_{i}") } else { format!("kmf_{}", i - d) })
            .collect();
        let ids: Vec<String> = rows.iter().map(|r| r.subject_id.clone()).collect();
        write_attributions_csv(&dir.join("attributions.csv"), &ids, &attrs)?;
        let ranking = importance(&attrs);
        write_importance_csv(&dir.join("importance.csv"), &ranking, &names)?;
        let f = s.feature.unwrap_or(ranking[0].0);
        let dep = dependence_export(&attrs, &x, f, s.color)?;
        write_dependence_csv(&dir.join("dependence.csv"), &dep)?;
        write_json(
            &dir.join("summary.json"),
            &serde_json::json!({
                "target": s.target,
                "model": s.model,
                "feature": names.get(f),
                "max_local_accuracy_gap": gap,
            }),
        )
    }

    fn manifold(&self, dir: &Path) -> CliResult<()> {
        let rows = self.subjects()?;
        let mu = self.latents(&rows)?;
        let (model, _) = Cvae::<f32>::load(&self.stage_dir(Stage::Train).join("model"))?;
        let d = model.latent_dim();
        if d < 2 {
            return Err(CliError::Config("the latent grid needs latent_dim >= 2".into()));
        }
        let p = &self.config.manifold;
        let (feat_a, feat_b) = match (p.feat_a, p.feat_b) {
            (Some(a), Some(b)) => (a, b),
            (a, b) => {
                let ranked = by_variance(&mu);
                let a = a.unwrap_or_else(|| *ranked.iter().find(|&&f| Some(f) != b).expect("d >= 2"));
                let b = b.unwrap_or_else(|| *ranked.iter().find(|&&f| f != a).expect("d >= 2"));
                (a, b)
            }
        };
        let mask = load_mask(self.stage_dir(Stage::Preprocess).join(CONSENSUS_MASK), VolumeFormat::Rawf32)?;
        let axis = p.slice_axis;
        let index = match p.slice_index {
            Some(i) => i,
            None => {
                let c = mask
                    .centroid()
                    .ok_or_else(|| Error::Parameter("consensus striatal mask is empty".into()))?;
                c[axis.index()].round() as usize
            }
        };
        let spacing = load_volume(
            self.stage_dir(Stage::Preprocess).join(&rows[0].volume),
            VolumeFormat::Rawf32,
        )?
        .spacing();
        let vols = decode_grid(&model, feat_a, feat_b, p.grid, p.range, spacing)?;
        montage(&vols, p.grid, axis, index)?.save_png(&dir.join("montage.png"))?;
        let means = tile_means(&vols, &mask)?;
        write_tile_means_csv(&dir.join("tile_means.csv"), &means, p.grid, p.range)?;
        let dom = dominant_axis(&means, p.grid);
        write_json(
            &dir.join("summary.json"),
            &serde_json::json!({
                "feat_a": feat_a,
                "feat_b": feat_b,
                "grid": p.grid,
                "range": p.range,
                "slice_axis": axis,
                "slice_index": index,
                "dominant_axis": match dom { GridAxis::Rows => "rows", GridAxis::Columns => "columns" },
                "monotone_fraction": monotone_fraction(&means, p.grid, dom),
            }),
        )
    }
}

/// Latent dims by decreasing variance across subjects, ties to the lower index.
fn by_variance(mu: &[Vec<f64>]) -> Vec<usize> {
    let n = mu.len() as f64;
    let d = mu[0].len();
    let var: Vec<f64> = (0..d)
        .map(|j| {
            let m = mu.iter().map(|r| r[j]).sum::<f64>() / n;
            mu.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n
        })
        .collect();
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    idx
}

/// Cross-validation where fold `f` sees only latents from the model trained without it.
fn fold_model_cv(
    ids: &[String],
    folds: &[Vec<usize>],
    mus: &[Vec<Vec<f64>>],
    y: &[f64],
    target: &str,
    label: ModelLabel,
    params: &CvParams,
) -> CliResult<CvReport> {
    let results = folds
        .par_iter()
        .enumerate()
        .map(|(f, held)| {
            let mu = &mus[f];
            let mut train: Vec<usize> = (0..ids.len()).filter(|i| !held.contains(i)).collect();
            train.sort_by(|&a, &b| ids[a].cmp(&ids[b]).then(a.cmp(&b)));
            let tx: Vec<Vec<f64>> = train.iter().map(|&i| mu[i].clone()).collect();
            let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let m = fit_model(label, &tx, &ty, params)?;
            let hx: Vec<Vec<f64>> = held.iter().map(|&i| mu[i].clone()).collect();
            m.predict(&hx)
        })
        .collect::<striavae::Result<Vec<_>>>()?;
    let mut predictions = vec![f64::NAN; y.len()];
    let mut fold_metrics = Vec::new();
    for (f, (held, pred)) in folds.iter().zip(&results).enumerate() {
        let ty: Vec<f64> = held.iter().map(|&i| y[i]).collect();
        let m = match metrics(&ty, pred) {
            Ok(m) => m,
            Err(Error::UndefinedR2 { mae, rmse }) => Metrics { mae, rmse, r2: f64::NAN },
            Err(e) => return Err(e.into()),
        };
        fold_metrics.push(FoldMetrics {
            fold: f,
            n: held.len(),
            mae: m.mae,
            rmse: m.rmse,
            r2: m.r2,
        });
        for (&i, &p) in held.iter().zip(pred) {
            predictions[i] = p;
        }
    }
    let pooled = metrics(y, &predictions)?;
    Ok(CvReport {
        target: target.to_owned(),
        d: mus[0][0].len(),
        model: label,
        mae: pooled.mae,
        rmse: pooled.rmse,
        r2: pooled.r2,
        folds: fold_metrics,
        predictions,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let json = serde_json::to_vec_pretty(value).expect("value serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}
