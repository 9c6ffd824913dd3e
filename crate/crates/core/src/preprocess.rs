//! Feature pre-selection for tabular modalities: missingness filtering,
//! median/mode imputation, one-hot encoding, z-scoring, Spearman pruning and
//! univariate Cox screening.
//!
//! Every statistic is estimated on training rows only and recorded in a
//! [`PreprocessReport`]; [`PreprocessReport::apply`] replays the recorded
//! decisions on held-out rows without re-estimating anything.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxph::{fit_cox, CoxFitOptions};
use crate::datamodel::{count_events, Column, ColumnKind, FeatureTable, SurvivalOutcome};
use crate::error::{Error, Result};
use crate::metrics::{concordance_counts, concordance_index, midranks};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Columns missing in strictly more than this fraction of rows are dropped.
    pub missing_threshold: f64,
    /// Columns with |rho| strictly above this against an earlier kept column are dropped.
    pub corr_cutoff: f64,
    pub n_splits: usize,
    pub val_fraction: f64,
    pub max_split_retries: usize,
    pub cox: CoxFitOptions,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            missing_threshold: 0.20,
            corr_cutoff: 0.8,
            n_splits: 10,
            val_fraction: 0.2,
            max_split_retries: 100,
            cox: CoxFitOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZStat {
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunedPair {
    pub kept: String,
    pub dropped: String,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenScore {
    pub column: String,
    pub mean_cindex: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    /// Training-table schema the report was fitted on.
    pub input_columns: Vec<Column>,
    pub dropped_missingness: Vec<String>,
    pub imputed_values: BTreeMap<String, f64>,
    pub imputed_categories: BTreeMap<String, String>,
    pub encoding_map: BTreeMap<String, Vec<String>>,
    pub zscore_stats: Vec<ZStat>,
    pub dropped_zero_variance: Vec<String>,
    pub pruned_correlated: Vec<PrunedPair>,
    /// Every screened column, ranked by mean validation C-index (descending).
    pub screened: Vec<ScreenScore>,
    /// Columns passing the screen (mean C-index > 0.5), in rank order.
    pub candidates: Vec<String>,
}

/// One random sub-training / sub-validation partition of a training cohort.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn drop_high_missingness(t: &FeatureTable, threshold: f64) -> Result<(FeatureTable, Vec<String>)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "missingness threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let n = t.n_rows().max(1) as f64;
    let (keep, drop): (Vec<usize>, Vec<usize>) =
        (0..t.n_cols()).partition(|&j| t.missing_count(j) as f64 / n <= threshold);
    if keep.is_empty() {
        return Err(Error::InvalidArgument(
            "every column exceeds the missingness threshold".into(),
        ));
    }
    let dropped = drop.iter().map(|&j| t.columns()[j].name.clone()).collect();
    Ok((t.select_columns(&keep), dropped))
}

/// Lower middle value for even counts.
fn lower_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

#[derive(Clone, Debug, PartialEq)]
pub enum Imputed {
    Numeric(f64),
    Category(String),
}

/// Numeric gaps get the column median, categorical gaps the mode (ties go to
/// the lexicographically smallest level).
pub fn impute_missing(t: &FeatureTable) -> Result<(FeatureTable, Vec<(String, Imputed)>)> {
    let (ids, cols, mut values, mut missing) = t.clone().into_parts();
    let mut fills = Vec::with_capacity(cols.len());
    for (j, col) in cols.iter().enumerate() {
        let observed: Vec<f64> = (0..ids.len())
            .filter(|&i| !missing[[i, j]])
            .map(|i| values[[i, j]])
            .collect();
        if observed.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "column {:?} has no observed values",
                col.name
            )));
        }
        let (fill, rec) = match &col.kind {
            ColumnKind::Numeric => {
                let m = lower_median(observed);
                (m, Imputed::Numeric(m))
            }
            ColumnKind::Categorical { levels } => {
                let mut counts = vec![0usize; levels.len()];
                for v in &observed {
                    counts[*v as usize] += 1;
                }
                let best = counts.iter().copied().max().unwrap();
                let code = counts.iter().position(|&c| c == best).unwrap();
                (code as f64, Imputed::Category(levels[code].clone()))
            }
        };
        for i in 0..ids.len() {
            if missing[[i, j]] {
                values[[i, j]] = fill;
                missing[[i, j]] = false;
            }
        }
        fills.push((col.name.clone(), rec));
    }
    Ok((FeatureTable::new(ids, cols, values, missing)?, fills))
}

fn one_hot_name(col: &str, level: &str) -> String {
    format!("{col}={level}")
}

/// Replaces each categorical column by one 0/1 column per observed level,
/// named `column=level`, at the position of the original column.
pub fn encode_one_hot(t: &FeatureTable) -> Result<(FeatureTable, BTreeMap<String, Vec<String>>)> {
    let n = t.n_rows();
    let mut out_cols: Vec<Column> = Vec::new();
    let mut out_vals: Vec<Vec<f64>> = Vec::new();
    let mut out_missing: Vec<Vec<bool>> = Vec::new();
    let mut map = BTreeMap::new();
    for (j, col) in t.columns().iter().enumerate() {
        let values = t.column(j);
        match &col.kind {
            ColumnKind::Numeric => {
                out_cols.push(col.clone());
                out_vals.push(values.to_vec());
                out_missing.push(t.missing().column(j).to_vec());
            }
            ColumnKind::Categorical { levels } => {
                let mut present = vec![false; levels.len()];
                for i in 0..n {
                    if !t.missing()[[i, j]] {
                        present[values[i] as usize] = true;
                    }
                }
                let mut names = Vec::new();
                for (code, level) in levels.iter().enumerate().filter(|(c, _)| present[*c]) {
                    let name = one_hot_name(&col.name, level);
                    out_cols.push(Column::numeric(name.clone()));
                    out_vals.push(
                        (0..n)
                            .map(|i| (values[i] as usize == code && !t.missing()[[i, j]]) as u8 as f64)
                            .collect(),
                    );
                    out_missing.push(t.missing().column(j).to_vec());
                    names.push(name);
                }
                map.insert(col.name.clone(), names);
            }
        }
    }
    let p = out_cols.len();
    let values = Array2::from_shape_fn((n, p), |(i, k)| out_vals[k][i]);
    let missing = Array2::from_shape_fn((n, p), |(i, k)| out_missing[k][i]);
    Ok((
        FeatureTable::new(t.patient_ids().to_vec(), out_cols, values, missing)?,
        map,
    ))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Z-scores numeric columns with the sample (n − 1) standard deviation.
///
/// Without `stats`, statistics come from `t` and zero-variance columns are
/// dropped and listed. With `stats`, exactly the listed columns are
/// transformed with the given statistics.
pub fn zscore(
    t: &FeatureTable,
    stats: Option<&[ZStat]>,
) -> Result<(FeatureTable, Vec<ZStat>, Vec<String>)> {
    if let Some(c) = t.columns().iter().find(|c| c.is_categorical()) {
        return Err(Error::InvalidArgument(format!(
            "column {:?} must be one-hot encoded before z-scoring",
            c.name
        )));
    }
    let (stats, dropped) = match stats {
        Some(s) => (s.to_vec(), vec![]),
        None => {
            let mut stats = Vec::new();
            let mut dropped = Vec::new();
            for (j, c) in t.columns().iter().enumerate() {
                let (mean, sd) = mean_sd(&t.column(j).to_vec());
                if sd > 1e-12 * mean.abs().max(1.0) {
                    stats.push(ZStat {
                        column: c.name.clone(),
                        mean,
                        sd,
                    });
                } else {
                    dropped.push(c.name.clone());
                }
            }
            (stats, dropped)
        }
    };
    let names: Vec<String> = stats.iter().map(|s| s.column.clone()).collect();
    let sub = t.select_named(&names)?;
    let (ids, cols, mut values, missing) = sub.into_parts();
    for (k, s) in stats.iter().enumerate() {
        values.column_mut(k).mapv_inplace(|x| (x - s.mean) / s.sd);
    }
    Ok((FeatureTable::new(ids, cols, values, missing)?, stats, dropped))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// False when either input has zero rank variance; `rho` is then 0.
    pub defined: bool,
}

fn pearson(x: &[f64], y: &[f64]) -> Spearman {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Spearman {
            rho: 0.0,
            defined: false,
        };
    }
    Spearman {
        rho: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        defined: true,
    }
}

/// Spearman rank correlation: Pearson correlation of mid-ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs two equal-length vectors of length >= 2".into(),
        ));
    }
    Ok(pearson(&midranks(x), &midranks(y)))
}

/// Greedy scan in table order: a column is dropped iff |rho| > cutoff against
/// any column already kept.
pub fn prune_correlated(t: &FeatureTable, cutoff: f64) -> (FeatureTable, Vec<PrunedPair>) {
    let ranks: Vec<Vec<f64>> = (0..t.n_cols()).map(|j| midranks(&t.column(j).to_vec())).collect();
    let mut kept: Vec<usize> = Vec::new();
    let mut pruned = Vec::new();
    for j in 0..t.n_cols() {
        let hit = kept.iter().find_map(|&k| {
            let r = pearson(&ranks[k], &ranks[j]).rho;
            (r.abs() > cutoff).then_some((k, r))
        });
        match hit {
            Some((k, rho)) => pruned.push(PrunedPair {
                kept: t.columns()[k].name.clone(),
                dropped: t.columns()[j].name.clone(),
                rho,
            }),
            None => kept.push(j),
        }
    }
    (t.select_columns(&kept), pruned)
}

fn has_comparable_pair(outcomes: &[SurvivalOutcome], rows: &[usize]) -> bool {
    let sub: Vec<SurvivalOutcome> = rows.iter().map(|&i| outcomes[i]).collect();
    let zeros = vec![0.0; sub.len()];
    concordance_counts(&zeros, &sub)
        .map(|c| c.comparable > 0)
        .unwrap_or(false)
}

/// Draws `n_splits` random partitions with `val_fraction` of rows held out.
/// A partition is redrawn until its sub-training part has at least two events
/// and its sub-validation part has a comparable pair.
pub fn draw_subsplits(
    outcomes: &[SurvivalOutcome],
    n_splits: usize,
    val_fraction: f64,
    max_retries: usize,
    seed: u64,
    endpoint: &str,
) -> Result<Vec<SubSplit>> {
    let n = outcomes.len();
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {val_fraction} of {n} patients"
        )));
    }
    (0..n_splits)
        .map(|s| {
            for attempt in 0..max_retries {
                let mut rng = stream_rng(seed, &[s as u64, attempt as u64]);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                let mut val = idx[..n_val].to_vec();
                let mut train = idx[n_val..].to_vec();
                val.sort_unstable();
                train.sort_unstable();
                let train_events = train.iter().filter(|&&i| outcomes[i].event).count();
                if train_events >= 2 && has_comparable_pair(outcomes, &val) {
                    return Ok(SubSplit { train, val });
                }
            }
            Err(Error::SplitRetriesExhausted {
                endpoint: endpoint.to_string(),
                attempts: max_retries,
            })
        })
        .collect()
}

/// Validation C-index of a Cox model on the given columns, one per split.
/// Each entry is the fit-and-score result for that split.
pub fn validation_cindices(
    x: &Array2<f64>,
    cols: &[usize],
    outcomes: &[SurvivalOutcome],
    splits: &[SubSplit],
    cox: &CoxFitOptions,
) -> Vec<Result<f64>> {
    let names: Vec<String> = cols.iter().map(|j| format!("c{j}")).collect();
    let sub = x.select(Axis(1), cols);
    splits
        .iter()
        .map(|s| {
            let xt = sub.select(Axis(0), &s.train);
            let ot: Vec<SurvivalOutcome> = s.train.iter().map(|&i| outcomes[i]).collect();
            let m = fit_cox(xt.view(), &names, &ot, cox)?;
            let xv = sub.select(Axis(0), &s.val);
            let ov: Vec<SurvivalOutcome> = s.val.iter().map(|&i| outcomes[i]).collect();
            concordance_index(&m.predict_matrix(xv.view())?, &ov)
        })
        .collect()
}

/// Mean validation C-index across splits; a split whose fit fails counts as
/// 0.5 (no discrimination).
pub fn mean_validation_cindex(
    x: &Array2<f64>,
    cols: &[usize],
    outcomes: &[SurvivalOutcome],
    splits: &[SubSplit],
    cox: &CoxFitOptions,
) -> f64 {
    let per_split = validation_cindices(x, cols, outcomes, splits, cox);
    let total: f64 = per_split
        .into_iter()
        .map(|r| {
            r.unwrap_or_else(|e| {
                log::debug!("validation fit on columns {cols:?} failed: {e}");
                0.5
            })
        })
        .sum();
    total / splits.len() as f64
}

/// Scores every column by its single-covariate mean validation C-index.
/// Returns all scores ranked descending (ties keep table order).
pub fn univariate_screen(
    t: &FeatureTable,
    outcomes: &[SurvivalOutcome],
    splits: &[SubSplit],
    cox: &CoxFitOptions,
) -> Result<Vec<ScreenScore>> {
    if t.n_rows() != outcomes.len() {
        return Err(Error::InvalidArgument("row count differs from outcome count".into()));
    }
    if splits.is_empty() {
        return Err(Error::InvalidArgument("screening needs at least one split".into()));
    }
    let x = t.values().clone();
    let means: Vec<f64> = (0..t.n_cols())
        .into_par_iter()
        .map(|j| mean_validation_cindex(&x, &[j], outcomes, splits, cox))
        .collect();
    let mut scores: Vec<ScreenScore> = t
        .columns()
        .iter()
        .zip(means)
        .map(|(c, m)| ScreenScore {
            column: c.name.clone(),
            mean_cindex: m,
        })
        .collect();
    scores.sort_by(|a, b| b.mean_cindex.total_cmp(&a.mean_cindex));
    Ok(scores)
}

/// Fits the full pre-selection pipeline on training rows.
///
/// Returns the report and the training table after pruning (all surviving
/// columns, z-scored); `report.candidates` lists the screened-in columns in
/// rank order.
pub fn fit_preprocess(
    t: &FeatureTable,
    outcomes: &[SurvivalOutcome],
    splits: &[SubSplit],
    cfg: &PreprocessConfig,
) -> Result<(PreprocessReport, FeatureTable)> {
    if count_events(outcomes) < 2 {
        return Err(Error::InvalidArgument("pre-selection needs at least two events".into()));
    }
    let mut report = PreprocessReport {
        input_columns: t.columns().to_vec(),
        ..Default::default()
    };
    let (t1, dropped) = drop_high_missingness(t, cfg.missing_threshold)?;
    report.dropped_missingness = dropped;
    let (t2, fills) = impute_missing(&t1)?;
    for (name, fill) in fills {
        match fill {
            Imputed::Numeric(v) => {
                report.imputed_values.insert(name, v);
            }
            Imputed::Category(c) => {
                report.imputed_categories.insert(name, c);
            }
        }
    }
    let (t3, enc) = encode_one_hot(&t2)?;
    report.encoding_map = enc;
    let (t4, stats, zero_var) = zscore(&t3, None)?;
    report.zscore_stats = stats;
    report.dropped_zero_variance = zero_var;
    let (t5, pruned) = prune_correlated(&t4, cfg.corr_cutoff);
    report.pruned_correlated = pruned;
    report.screened = univariate_screen(&t5, outcomes, splits, &cfg.cox)?;
    report.candidates = report
        .screened
        .iter()
        .filter(|s| s.mean_cindex > 0.5)
        .map(|s| s.column.clone())
        .collect();
    Ok((report, t5))
}

impl PreprocessReport {
    /// Column names of the post-pruning table, in table order.
    pub fn output_columns(&self) -> Vec<String> {
        let pruned: std::collections::HashSet<&str> =
            self.pruned_correlated.iter().map(|p| p.dropped.as_str()).collect();
        self.zscore_stats
            .iter()
            .map(|s| s.column.clone())
            .filter(|c| !pruned.contains(c.as_str()))
            .collect()
    }

    /// Replays the fitted transformations on new rows. Categorical cells are
    /// matched by level name, so the table may come from a separate file.
    pub fn apply(&self, t: &FeatureTable) -> Result<FeatureTable> {
        let n = t.n_rows();
        let wanted = self.output_columns();
        let stat_of: BTreeMap<&str, &ZStat> =
            self.zscore_stats.iter().map(|s| (s.column.as_str(), s)).collect();
        // Map each one-hot output back to (source column, level).
        let mut onehot_src: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
        for (src, names) in &self.encoding_map {
            for name in names {
                onehot_src.insert(name.as_str(), (src.as_str(), &name[src.len() + 1..]));
            }
        }
        let mut values = Array2::zeros((n, wanted.len()));
        for (k, name) in wanted.iter().enumerate() {
            let stat = stat_of[name.as_str()];
            let raw: Vec<f64> = if let Some(&(src, level)) = onehot_src.get(name.as_str()) {
                let j = t.column_index(src).ok_or_else(|| {
                    Error::InvalidArgument(format!("held-out table lacks column {src:?}"))
                })?;
                let fill = &self.imputed_categories[src];
                let levels = match &t.columns()[j].kind {
                    ColumnKind::Categorical { levels } => levels.clone(),
                    ColumnKind::Numeric => vec![],
                };
                (0..n)
                    .map(|i| {
                        let cell = if t.missing()[[i, j]] {
                            fill.clone()
                        } else if levels.is_empty() {
                            // Numeric-looking categories parsed as numbers.
                            t.values()[[i, j]].to_string()
                        } else {
                            levels[t.values()[[i, j]] as usize].clone()
                        };
                        (cell == level) as u8 as f64
                    })
                    .collect()
            } else {
                let j = t.column_index(name).ok_or_else(|| {
                    Error::InvalidArgument(format!("held-out table lacks column {name:?}"))
                })?;
                if t.columns()[j].is_categorical() {
                    return Err(Error::InvalidArgument(format!(
                        "column {name:?} is numeric in training but categorical here"
                    )));
                }
                let fill = self.imputed_values[name.as_str()];
                (0..n)
                    .map(|i| {
                        if t.missing()[[i, j]] {
                            fill
                        } else {
                            t.values()[[i, j]]
                        }
                    })
                    .collect()
            };
            for i in 0..n {
                values[[i, k]] = (raw[i] - stat.mean) / stat.sd;
            }
        }
        FeatureTable::from_numeric(t.patient_ids().to_vec(), wanted, values)
    }
}
