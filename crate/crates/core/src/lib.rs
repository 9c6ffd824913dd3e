//! Multimodal survival prediction.
//!
//! Per-modality Cox models (tabular data, with pre-selection and forward
//! feature selection) and a deep Cox scorer over patch-embedding bags produce
//! risk scores that are fused with validation-performance weights and
//! evaluated with censored-data metrics under k-fold cross-validation.

pub mod coxph;
pub mod cvharness;
pub mod datamodel;
pub mod deepcox;
pub mod ensemble;
pub mod error;
pub mod featsel;
pub mod metrics;
pub mod preprocess;
pub mod rng;
pub mod synthgen;
pub mod wsiprep;

pub use error::{Error, Result};
