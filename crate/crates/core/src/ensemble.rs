//! Late fusion of per-modality risk scores: `r_i = Σ_m w_m r_{i,m}` with
//! `w_m = p_m / Σ_k p_k`, where `p_m` is modality m's validation C-index.

use serde::{Deserialize, Serialize};

use crate::datamodel::RiskScoreTable;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    ValidationPerformance,
    Uniform,
}

/// Whether weights come from each fold's own validation metrics or from
/// their average over all folds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    #[default]
    PerFold,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityWeights {
    pub modality_names: Vec<String>,
    pub weights: Vec<f64>,
    pub source: WeightSource,
    pub p_val: Vec<f64>,
}

pub fn modality_weights(names: &[String], p_val: &[f64]) -> Result<ModalityWeights> {
    if names.is_empty() || names.len() != p_val.len() {
        return Err(Error::InvalidArgument(format!(
            "{} modality names for {} validation values",
            names.len(),
            p_val.len()
        )));
    }
    if let Some((i, p)) = p_val.iter().enumerate().find(|(_, p)| !(**p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "validation metric for {:?} must be positive, got {p}",
            names[i]
        )));
    }
    let total: f64 = p_val.iter().sum();
    Ok(ModalityWeights {
        modality_names: names.to_vec(),
        weights: p_val.iter().map(|p| p / total).collect(),
        source: WeightSource::ValidationPerformance,
        p_val: p_val.to_vec(),
    })
}

pub fn uniform_weights(names: &[String]) -> Result<ModalityWeights> {
    if names.is_empty() {
        return Err(Error::InvalidArgument("at least one modality required".into()));
    }
    let m = names.len() as f64;
    Ok(ModalityWeights {
        modality_names: names.to_vec(),
        weights: vec![1.0 / m; names.len()],
        source: WeightSource::Uniform,
        p_val: vec![],
    })
}

/// Weights from per-modality validation metrics averaged across folds.
pub fn global_weights(names: &[String], per_fold_p_val: &[Vec<f64>]) -> Result<ModalityWeights> {
    if per_fold_p_val.is_empty() {
        return Err(Error::InvalidArgument("no folds to average".into()));
    }
    let mut mean = vec![0.0; names.len()];
    for p in per_fold_p_val {
        if p.len() != names.len() {
            return Err(Error::InvalidArgument("fold metric count differs from modality count".into()));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / per_fold_p_val.len() as f64;
        }
    }
    modality_weights(names, &mean)
}

/// Weighted sum of modality scores per patient. Uniform weights return the
/// arithmetic mean, computed as sum / M.
pub fn fuse_risks(scores: &RiskScoreTable, w: &ModalityWeights) -> Result<Vec<f64>> {
    if scores.modality_names != w.modality_names || w.weights.len() != scores.n_modalities() {
        return Err(Error::InvalidArgument(format!(
            "score modalities {:?} do not match weight modalities {:?}",
            scores.modality_names, w.modality_names
        )));
    }
    let m = scores.n_modalities() as f64;
    Ok(scores
        .scores
        .rows()
        .into_iter()
        .map(|row| match w.source {
            WeightSource::Uniform => row.sum() / m,
            WeightSource::ValidationPerformance => row.iter().zip(&w.weights).map(|(r, w)| r * w).sum(),
        })
        .collect())
}
