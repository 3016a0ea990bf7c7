//! `run_manifest.json`: config hash, seeds, timings and output digests per stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use striavae::Error;

use crate::error::CliResult;

pub const RUN_MANIFEST: &str = "run_manifest.json";
const FORMAT: &str = "striavae-run/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub index: usize,
    pub seed: u64,
    pub wall_ms: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Self {
            format: FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            seed,
            stages: Vec::new(),
        }
    }

    /// The manifest in `dir` when it belongs to the same config, else a fresh one.
    pub fn open(dir: &Path, config_hash: &str, seed: u64) -> Self {
        fs::read(dir.join(RUN_MANIFEST))
            .ok()
            .and_then(|b| serde_json::from_slice::<RunManifest>(&b).ok())
            .filter(|m| m.format == FORMAT && m.config_hash == config_hash)
            .unwrap_or_else(|| Self::new(config_hash, seed))
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(RUN_MANIFEST);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)
    }

    pub fn record(&mut self, rec: StageRecord) {
        self.stages.retain(|s| s.stage != rec.stage);
        self.stages.push(rec);
        self.stages.sort_by_key(|s| s.index);
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(RUN_MANIFEST);
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Digest of every file under `stage_dir`, sorted by path.
pub fn digest_outputs(run_dir: &Path, stage_dir: &Path) -> CliResult<Vec<OutputFile>> {
    let mut files = Vec::new();
    if stage_dir.is_dir() {
        walk(stage_dir, &mut files).map_err(|e| Error::io(stage_dir, e))?;
    }
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(run_dir).unwrap_or(&p);
            let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok(OutputFile {
                path,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect()
}
