//! Parameter checkpoints: a JSON manifest plus one little-endian f32 blob per
//! parameter tensor, named `layer{index:02}_{role}.f32`.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{LayerSpec, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub layer: usize,
    pub role: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<ParamEntry>,
    pub seed: u64,
    pub epoch: usize,
    /// Model-specific configuration.
    pub model: serde_json::Value,
}

pub fn blob_name(layer: usize, role: &str) -> String {
    format!("layer{layer:02}_{role}.f32")
}

/// Writes the manifest and blobs. `params` pairs each entry with its tensor.
pub fn save_checkpoint(dir: &Path, manifest: &CheckpointManifest, params: &[Tensor<f32>]) -> Result<()> {
    if manifest.params.len() != params.len() {
        return Err(Error::Contract("manifest and parameter list differ in length".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, t) in manifest.params.iter().zip(params) {
        t.expect_shape(&entry.shape)?;
        let mut bytes = vec![0u8; 4 * t.numel()];
        LittleEndian::write_f32_into(t.data(), &mut bytes);
        let path = dir.join(&entry.file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<Tensor<f32>>)> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    let mut params = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Corrupt(format!(
                "{} holds {} bytes, shape {:?} needs {}",
                entry.file,
                bytes.len(),
                entry.shape,
                4 * n
            )));
        }
        let mut data = vec![0f32; n];
        LittleEndian::read_f32_into(&bytes, &mut data);
        params.push(Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((manifest, params))
}
