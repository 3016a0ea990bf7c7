//! Staged command line pipeline: phantom generation or ingest, preprocessing,
//! CVAE training, encoding, latent features, regression, cross-validation,
//! TreeSHAP and latent-grid rendering.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{Config, FitMode};
pub use error::{CliError, CliResult};
pub use manifest::{RunManifest, StageRecord, RUN_MANIFEST};
pub use stages::{Runner, Stage};
