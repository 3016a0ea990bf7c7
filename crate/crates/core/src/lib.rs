//! Latent-space modelling of striatal uptake volumes.
//!
//! The crate covers the whole path from a scan to an explained symptom
//! prediction:
//!
//! * [`volume`]: volume I/O (NIfTI-1 and a raw float format) and intensity
//!   preprocessing.
//! * [`nn`]: a small reverse-mode autodiff tape with 3D (transposed)
//!   convolutions and Adam.
//! * [`cvae`]: the 3D convolutional beta-VAE, its losses and training loop.
//! * [`phantom`]: synthetic striatal volumes with known generative factors.
//! * [`features`]: k-means and distance-to-centre features over latent means.
//! * [`trees`]: CART and gradient-boosted regression trees.
//! * [`evalpipe`]: k-fold cross-validation and regression metrics.
//! * [`explain`]: exact path-dependent TreeSHAP.
//! * [`manifold`]: latent grid decoding and montage rendering.

// NaN-rejecting range checks read as `!(x >= 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cvae;
pub mod error;
pub mod evalpipe;
pub mod explain;
pub mod features;
pub mod manifold;
pub mod nn;
pub mod phantom;
pub mod trees;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
