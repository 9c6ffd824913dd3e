//! Forward feature selection around Cox fitting, scored by mean validation
//! C-index over the same sub-splits used for univariate screening.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxph::{fit_cox, CoxFitOptions, CoxModel};
use crate::datamodel::{FeatureTable, SurvivalOutcome};
use crate::error::{Error, Result};
use crate::preprocess::{validation_cindices, SubSplit};

pub const MAX_FEATURES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    NoImprovement,
    MaxFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub added_feature: String,
    pub mean_val_cindex: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// Accepted steps; the first entry is the initial top-ranked candidate.
    pub iterations: Vec<SelectionStep>,
    pub optimal_set: Vec<String>,
    pub best_val_cindex: f64,
    pub stop_reason: StopReason,
    /// Candidates skipped because an inner fit failed.
    pub skipped: Vec<String>,
}

fn mean_strict(
    x: &ndarray::Array2<f64>,
    cols: &[usize],
    outcomes: &[SurvivalOutcome],
    splits: &[SubSplit],
    cox: &CoxFitOptions,
) -> Result<f64> {
    let per: Result<Vec<f64>> = validation_cindices(x, cols, outcomes, splits, cox).into_iter().collect();
    let per = per?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Greedy forward selection over `ranked_candidates` (best first).
///
/// Starts from the top candidate; each round adds the candidate whose
/// inclusion gives the highest mean validation C-index, if that strictly
/// beats the current best. Ties go to the earlier-ranked candidate. The
/// returned model is refitted on all rows with the selected set.
pub fn forward_select(
    t: &FeatureTable,
    outcomes: &[SurvivalOutcome],
    ranked_candidates: &[String],
    splits: &[SubSplit],
    max_features: usize,
    cox: &CoxFitOptions,
) -> Result<(SelectionTrace, CoxModel)> {
    if ranked_candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate features to select from".into()));
    }
    if splits.is_empty() {
        return Err(Error::InvalidArgument("forward selection needs at least one split".into()));
    }
    if max_features == 0 || max_features > MAX_FEATURES {
        return Err(Error::InvalidArgument(format!(
            "max_features must lie in 1..={MAX_FEATURES}, got {max_features}"
        )));
    }
    let cand_idx: Vec<usize> = ranked_candidates
        .iter()
        .map(|c| {
            t.column_index(c)
                .ok_or_else(|| Error::InvalidArgument(format!("candidate {c:?} not in table")))
        })
        .collect::<Result<_>>()?;
    let x = t.values().clone();
    let mut skipped = Vec::new();

    // The initial feature is the first candidate whose model can be scored.
    let mut start = None;
    for (r, &j) in cand_idx.iter().enumerate() {
        match mean_strict(&x, &[j], outcomes, splits, cox) {
            Ok(c) => {
                start = Some((r, c));
                break;
            }
            Err(e) => {
                log::warn!("skipping candidate {:?}: {e}", ranked_candidates[r]);
                skipped.push(ranked_candidates[r].clone());
            }
        }
    }
    let (r0, c0) = start.ok_or_else(|| Error::NonConvergence("no candidate could be fitted".into()))?;
    let mut selected = vec![r0];
    let mut best = c0;
    let mut iterations = vec![SelectionStep {
        added_feature: ranked_candidates[r0].clone(),
        mean_val_cindex: c0,
    }];
    let mut remaining: Vec<usize> = (r0 + 1..cand_idx.len()).collect();

    let stop_reason = loop {
        if selected.len() >= max_features {
            break StopReason::MaxFeatures;
        }
        let base: Vec<usize> = selected.iter().map(|&r| cand_idx[r]).collect();
        let scores: Vec<Result<f64>> = remaining
            .par_iter()
            .map(|&r| {
                let mut cols = base.clone();
                cols.push(cand_idx[r]);
                mean_strict(&x, &cols, outcomes, splits, cox)
            })
            .collect();
        let mut choice: Option<(usize, f64)> = None;
        let mut failed = Vec::new();
        for (pos, s) in scores.into_iter().enumerate() {
            match s {
                Ok(c) => {
                    if choice.is_none_or(|(_, b)| c > b) {
                        choice = Some((pos, c));
                    }
                }
                Err(e) => {
                    log::warn!("skipping candidate {:?}: {e}", ranked_candidates[remaining[pos]]);
                    failed.push(pos);
                }
            }
        }
        let accept = choice.filter(|&(_, c)| c > best);
        for &pos in failed.iter().rev() {
            skipped.push(ranked_candidates[remaining[pos]].clone());
        }
        match accept {
            Some((pos, c)) => {
                let r = remaining[pos];
                selected.push(r);
                best = c;
                iterations.push(SelectionStep {
                    added_feature: ranked_candidates[r].clone(),
                    mean_val_cindex: c,
                });
                remaining = remaining
                    .iter()
                    .enumerate()
                    .filter(|(p, _)| *p != pos && !failed.contains(p))
                    .map(|(_, &r)| r)
                    .collect();
            }
            None => break StopReason::NoImprovement,
        }
    };

    let optimal_set: Vec<String> = selected.iter().map(|&r| ranked_candidates[r].clone()).collect();
    let cols: Vec<usize> = selected.iter().map(|&r| cand_idx[r]).collect();
    let model = fit_cox(
        x.select(ndarray::Axis(1), &cols).view(),
        &optimal_set,
        outcomes,
        cox,
    )?;
    Ok((
        SelectionTrace {
            iterations,
            optimal_set,
            best_val_cindex: best,
            stop_reason,
            skipped,
        },
        model,
    ))
}
