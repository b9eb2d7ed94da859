//! From whole-slide image to patient-level biomarker prediction: tile
//! extraction with quality control and stain normalization, per-tile
//! feature extraction, weakly-supervised transformer aggregation,
//! cross-validated training, bootstrap-evaluated metrics and gradient-based
//! spatial explanations.

pub mod cohort;
pub mod config;
pub mod error;
pub mod features;
pub mod heatmap;
pub mod model;
pub mod preprocess;
pub mod qc;
pub mod slide;
pub mod splits;
pub mod stain;
pub mod stats;
pub mod synth;

pub use error::{Result, StampError};
