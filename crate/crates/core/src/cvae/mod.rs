//! 3D convolutional beta-VAE: architecture, losses and training.
//!
//! Encoder: four stride-2 `3x3x3` convolutions (ReLU), flatten, a hidden
//! linear layer (ReLU) and two linear heads for the posterior mean and log
//! variance. Decoder: linear (ReLU) back to the last feature map, then four
//! stride-2 transposed convolutions (ReLU on all but the last).

mod loss;
mod model;
mod train;

pub use loss::{loss_kld, loss_recon, loss_total, reparameterize, tape_kld, tape_recon};
pub use model::{Architecture, Cvae};
pub use train::{loss_gradients, train, train_with, BatchLoss, EpochLoss, TrainLog};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Dims;

/// Posterior parameters of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentCode {
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mu.len() != logvar.len() || mu.is_empty() {
            return Err(Error::Shape(format!(
                "mu has {} entries, logvar {}",
                mu.len(),
                logvar.len()
            )));
        }
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Volume extent `[nx, ny, nz]`.
    pub input_dims: Dims,
    pub seed: u64,
    /// Output channels of the four encoder convolutions.
    pub channels: [usize; 4],
    /// Width of the encoder's hidden linear layer.
    pub hidden: usize,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            beta: 1.0,
            epochs: 400,
            lr: 1e-3,
            batch_size: 16,
            input_dims: [96, 112, 96],
            seed: 0,
            channels: [32, 64, 128, 256],
            hidden: 512,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim < 1 {
            return bad("latent_dim must be >= 1".into());
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.channels.contains(&0) || self.hidden == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.input_dims.iter().any(|&d| d < 2) {
            return bad(format!("input dims too small: {:?}", self.input_dims));
        }
        Ok(())
    }
}
