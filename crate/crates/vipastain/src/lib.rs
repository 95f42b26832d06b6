//! Mask-guided virtual staining between H&E and CD20 with dual-stain TLS
//! detection, verifiable end to end on procedurally generated pseudo-histology.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`synthdata`]: pseudo-histology generator with exact ground truth
//! - [`patchio`]: tiling, stitching, stain normalization, dataset splits
//! - [`maskextract`]: unsupervised multi-Otsu tissue masks
//! - [`transfer`]: mask-guided cycle-consistent adversarial translation
//! - [`detect`]: TLS detection (single-stain, six-channel, NMS merge)
//! - [`evalmetrics`]: box/mask precision-recall and Fréchet distance
//! - [`pipeline`]: orchestration used by the `vipastain` CLI, including the
//!   desk-scale reproduction of the staining/detection comparison

pub mod config;
pub mod detect;
pub mod error;
pub mod evalmetrics;
pub mod imgutil;
pub mod manifest;
pub mod maskextract;
#[path = "nn/mod.rs"]
pub mod nn;
pub mod patchio;
pub mod pipeline;
pub mod synthdata;
pub mod transfer;

pub use error::{Error, Result};
