//! K-fold cross-validation: per-fold training of every modality model on
//! training rows only, validation-weighted and uniform fusion of the test
//! risks, pooling of held-out predictions and the final evaluation.

mod report;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coxph::fit_cox;
use crate::datamodel::{
    count_events, AlignedCohort, EmbeddingBag, Endpoint, FeatureTable, ModalityData, RiskScoreTable,
    SurvivalOutcome,
};
use crate::deepcox::{train_deep_cox, DeepCoxConfig};
use crate::ensemble::{fuse_risks, global_weights, modality_weights, uniform_weights, ModalityWeights, WeightMode};
use crate::error::{Error, Result};
use crate::featsel::{forward_select, SelectionTrace, MAX_FEATURES};
use crate::metrics::{
    bootstrap_ci, concordance_index, delong, horizon_labels, logrank_test, median_split, RiskGroup,
};
use crate::preprocess::{draw_subsplits, fit_preprocess, PreprocessConfig, PreprocessReport};
use crate::rng::{derive_seed, stream_rng};

pub use report::{
    km_rows, roc_rows, write_cv_outputs, write_km_svg, write_pooled_csv, write_roc_svg, KmRow, RocRow,
};

const STREAM_FOLDS: u64 = 10;
const STREAM_FIT: u64 = 11;
const STREAM_BOOT: u64 = 12;

pub const MMEM: &str = "mmem";
pub const MMEM_UNIFORM: &str = "mmem_uniform";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub n_folds: usize,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub max_features: usize,
    pub deep: DeepCoxConfig,
    /// Share of each fold's training rows held out for deep-model validation.
    pub deep_val_fraction: f64,
    pub weight_mode: WeightMode,
    pub n_bootstrap: usize,
    pub horizons_years: Vec<f64>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            seed: 0,
            preprocess: PreprocessConfig::default(),
            max_features: MAX_FEATURES,
            deep: DeepCoxConfig::default(),
            deep_val_fraction: 0.2,
            weight_mode: WeightMode::PerFold,
            n_bootstrap: 1000,
            horizons_years: vec![1.0, 3.0, 5.0],
        }
    }
}

/// Hex SHA-256 of the compact JSON form of `value`.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub seed: u64,
    pub patient_ids: Vec<String>,
    /// Fold index of `patient_ids[i]`.
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_folds];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Seeded shuffle, then round-robin over folds.
pub fn kfold(patient_ids: &[String], n_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {n_folds}")));
    }
    if patient_ids.len() < n_folds {
        return Err(Error::InvalidArgument(format!(
            "{} patients cannot fill {n_folds} folds",
            patient_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..patient_ids.len()).collect();
    order.shuffle(&mut stream_rng(seed, &[]));
    let mut fold_of = vec![0; patient_ids.len()];
    for (k, &i) in order.iter().enumerate() {
        fold_of[i] = k % n_folds;
    }
    Ok(FoldAssignment {
        n_folds,
        seed,
        patient_ids: patient_ids.to_vec(),
        fold_of,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModalityFit {
    Cox {
        candidates: Vec<String>,
        selection: SelectionTrace,
        features: Vec<String>,
        beta: Vec<f64>,
    },
    Deep {
        best_epoch: usize,
        val_loss: f64,
        val_cindex: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub endpoint: Endpoint,
    pub test_ids: Vec<String>,
    /// Held-out outcomes, attached after prediction for pooling.
    pub test_outcomes: Vec<SurvivalOutcome>,
    pub scores: RiskScoreTable,
    pub fits: Vec<ModalityFit>,
    pub weights: ModalityWeights,
    pub uniform: ModalityWeights,
    pub fused: Vec<f64>,
    pub fused_uniform: Vec<f64>,
}

/// How z-score statistics are obtained for tabular modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Standardization {
    TrainOnly,
    /// Statistics over training and test rows together. Only used to check
    /// that the regular path really is train-only.
    Leaky,
}

struct Fitted {
    test_risks: Vec<f64>,
    p_val: f64,
    fit: ModalityFit,
}

fn column_mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Re-derives the z-score statistics of `report` from the union of training
/// and test rows.
fn leaky_report(report: &PreprocessReport, train: &FeatureTable, test: &FeatureTable) -> Result<PreprocessReport> {
    let mut raw = report.clone();
    for s in &mut raw.zscore_stats {
        s.mean = 0.0;
        s.sd = 1.0;
    }
    let (a, b) = (raw.apply(train)?, raw.apply(test)?);
    let mut out = report.clone();
    for s in &mut out.zscore_stats {
        if let Some(j) = a.column_index(&s.column) {
            let all: Vec<f64> = a.column(j).iter().chain(b.column(j).iter()).copied().collect();
            let (mean, sd) = column_mean_sd(&all);
            s.mean = mean;
            s.sd = sd;
        }
    }
    Ok(out)
}

fn fit_table_modality(
    train: &FeatureTable,
    test: &FeatureTable,
    outcomes: &[SurvivalOutcome],
    cfg: &CvConfig,
    seed: u64,
    endpoint: Endpoint,
    standardization: Standardization,
) -> Result<Fitted> {
    let pc = &cfg.preprocess;
    let splits = draw_subsplits(
        outcomes,
        pc.n_splits,
        pc.val_fraction,
        pc.max_split_retries,
        seed,
        endpoint.as_str(),
    )?;
    let (report, z) = fit_preprocess(train, outcomes, &splits, pc)?;
    let mut candidates = report.candidates.clone();
    if candidates.is_empty() {
        // Nothing beats chance on validation; fall back to the best-ranked column.
        let top = report
            .screened
            .first()
            .ok_or_else(|| Error::InvalidArgument("no columns survive pre-processing".into()))?;
        log::warn!("no column screened above 0.5; using {:?}", top.column);
        candidates.push(top.column.clone());
    }
    let (selection, mut model) = forward_select(&z, outcomes, &candidates, &splits, cfg.max_features, &pc.cox)?;
    let report = match standardization {
        Standardization::TrainOnly => report,
        Standardization::Leaky => {
            let leaky = leaky_report(&report, train, test)?;
            let x = leaky.apply(train)?.select_named(&model.feature_names)?;
            model = fit_cox(x.values().view(), &model.feature_names, outcomes, &pc.cox)?;
            leaky
        }
    };
    let test_x = report.apply(test)?;
    let test_risks = model.predict_risk(&test_x)?;
    Ok(Fitted {
        test_risks,
        p_val: selection.best_val_cindex,
        fit: ModalityFit::Cox {
            candidates,
            features: model.feature_names.clone(),
            beta: model.beta.clone(),
            selection,
        },
    })
}

fn fit_bag_modality(
    train: &[EmbeddingBag],
    test: &[EmbeddingBag],
    outcomes: &[SurvivalOutcome],
    cfg: &CvConfig,
    seed: u64,
    endpoint: Endpoint,
) -> Result<Fitted> {
    let split = draw_subsplits(
        outcomes,
        1,
        cfg.deep_val_fraction,
        cfg.preprocess.max_split_retries,
        seed,
        endpoint.as_str(),
    )?
    .remove(0);
    let pick = |rows: &[usize]| -> (Vec<EmbeddingBag>, Vec<SurvivalOutcome>) {
        (
            rows.iter().map(|&i| train[i].clone()).collect(),
            rows.iter().map(|&i| outcomes[i]).collect(),
        )
    };
    let (tb, to) = pick(&split.train);
    let (vb, vo) = pick(&split.val);
    let dcfg = DeepCoxConfig {
        seed,
        ..cfg.deep.clone()
    };
    let out = train_deep_cox(&tb, &to, &dcfg, &vb, &vo)?;
    Ok(Fitted {
        test_risks: out.model.predict(test)?,
        p_val: out.val_cindex,
        fit: ModalityFit::Deep {
            best_epoch: out.best_epoch,
            val_loss: out.val_loss,
            val_cindex: out.val_cindex,
        },
    })
}

fn run_fold_with(
    cohort: &AlignedCohort,
    folds: &FoldAssignment,
    fold: usize,
    endpoint: Endpoint,
    cfg: &CvConfig,
    standardization: Standardization,
) -> Result<FoldResult> {
    let failed = |cause: String| Error::FoldFailed { fold, cause };
    if folds.patient_ids != cohort.patient_ids {
        return Err(Error::InvalidArgument("fold assignment was made for another cohort".into()));
    }
    let train_rows = folds.train_rows(fold);
    let test_rows = folds.test_rows(fold);
    if test_rows.is_empty() {
        return Err(failed("empty test set".into()));
    }
    let train = cohort.subset(&train_rows);
    let test = cohort.subset(&test_rows);
    if count_events(&train.outcomes) < 2 {
        return Err(failed(format!("fewer than two {endpoint} events in the training set")));
    }

    let names: Vec<String> = cohort.modalities.iter().map(|m| m.name.clone()).collect();
    let mut fitted = Vec::with_capacity(names.len());
    for (k, (tr, te)) in train.modalities.iter().zip(&test.modalities).enumerate() {
        let seed = derive_seed(folds.seed, &[STREAM_FIT, fold as u64, k as u64]);
        let r = match (&tr.data, &te.data) {
            (ModalityData::Table(a), ModalityData::Table(b)) => {
                fit_table_modality(a, b, &train.outcomes, cfg, seed, endpoint, standardization)
            }
            (ModalityData::Bags(a), ModalityData::Bags(b)) => {
                fit_bag_modality(a, b, &train.outcomes, cfg, seed, endpoint)
            }
            _ => unreachable!("subset keeps modality kinds"),
        };
        fitted.push(r.map_err(|e| failed(format!("modality {:?}: {e}", tr.name)))?);
    }

    let n = test_rows.len();
    let scores = Array2::from_shape_fn((n, names.len()), |(i, m)| fitted[m].test_risks[i]);
    let scores = RiskScoreTable::new(test.patient_ids.clone(), names.clone(), scores)
        .map_err(|e| failed(e.to_string()))?;
    let p_val: Vec<f64> = fitted.iter().map(|f| f.p_val).collect();
    let weights = modality_weights(&names, &p_val).map_err(|e| failed(e.to_string()))?;
    let uniform = uniform_weights(&names)?;
    let fused = fuse_risks(&scores, &weights)?;
    let fused_uniform = fuse_risks(&scores, &uniform)?;
    Ok(FoldResult {
        fold,
        endpoint,
        test_ids: test.patient_ids,
        test_outcomes: test.outcomes,
        scores,
        fits: fitted.into_iter().map(|f| f.fit).collect(),
        weights,
        uniform,
        fused,
        fused_uniform,
    })
}

/// Trains every modality on the fold's training rows and scores its test
/// rows. Training code only ever sees training outcomes.
pub fn run_fold(
    cohort: &AlignedCohort,
    folds: &FoldAssignment,
    fold: usize,
    endpoint: Endpoint,
    cfg: &CvConfig,
) -> Result<FoldResult> {
    run_fold_with(cohort, folds, fold, endpoint, cfg, Standardization::TrainOnly)
}

/// Like [`run_fold`] but with z-score statistics taken over training and
/// test rows. Exists only as a reference for leakage tests.
pub fn run_fold_leaky(
    cohort: &AlignedCohort,
    folds: &FoldAssignment,
    fold: usize,
    endpoint: Endpoint,
    cfg: &CvConfig,
) -> Result<FoldResult> {
    run_fold_with(cohort, folds, fold, endpoint, cfg, Standardization::Leaky)
}

/// Held-out predictions of all folds, one row per patient, sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledPredictions {
    pub patient_ids: Vec<String>,
    pub folds: Vec<usize>,
    pub outcomes: Vec<SurvivalOutcome>,
    pub modality_names: Vec<String>,
    pub scores: Array2<f64>,
    pub fused: Vec<f64>,
    pub fused_uniform: Vec<f64>,
}

impl PooledPredictions {
    pub fn len(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patient_ids.is_empty()
    }

    /// Modality names followed by the two fusion variants.
    pub fn model_names(&self) -> Vec<String> {
        let mut v = self.modality_names.clone();
        v.push(MMEM.into());
        v.push(MMEM_UNIFORM.into());
        v
    }

    /// Scores of model `k` in [`PooledPredictions::model_names`] order.
    pub fn model_scores(&self, k: usize) -> Vec<f64> {
        let m = self.modality_names.len();
        match k {
            _ if k < m => self.scores.column(k).to_vec(),
            _ if k == m => self.fused.clone(),
            _ => self.fused_uniform.clone(),
        }
    }
}

pub fn aggregate(folds: &[FoldResult]) -> Result<PooledPredictions> {
    let first = folds
        .first()
        .ok_or_else(|| Error::InvalidArgument("no fold results to aggregate".into()))?;
    let names = first.scores.modality_names.clone();
    let mut rows: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for (r, f) in folds.iter().enumerate() {
        if f.scores.modality_names != names {
            return Err(Error::InvalidArgument(format!("fold {} has different modalities", f.fold)));
        }
        for (i, id) in f.test_ids.iter().enumerate() {
            if let Some(prev) = rows.insert(id.as_str(), (r, i, f.fold)) {
                return Err(Error::InvalidArgument(format!(
                    "patient {id:?} is in the test sets of folds {} and {}",
                    prev.2, f.fold
                )));
            }
        }
    }
    let n = rows.len();
    let mut scores = Array2::zeros((n, names.len()));
    let (mut ids, mut fold_idx, mut outcomes, mut fused, mut fused_uniform) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, (id, (r, i, fold))) in rows.into_iter().enumerate() {
        let f = &folds[r];
        ids.push(id.to_string());
        fold_idx.push(fold);
        outcomes.push(f.test_outcomes[i]);
        scores.row_mut(k).assign(&f.scores.scores.row(i));
        fused.push(f.fused[i]);
        fused_uniform.push(f.fused_uniform[i]);
    }
    Ok(PooledPredictions {
        patient_ids: ids,
        folds: fold_idx,
        outcomes,
        modality_names: names,
        scores,
        fused,
        fused_uniform,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonAuc {
    pub horizon_years: f64,
    pub n_included: usize,
    pub n_positive: usize,
    /// `None` when one label class is empty.
    pub auc: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub cindex: f64,
    pub cindex_lo: f64,
    pub cindex_hi: f64,
    pub n_high: usize,
    pub n_low: usize,
    /// `None` when the median split leaves a group empty.
    pub logrank_chi2: Option<f64>,
    pub logrank_p: Option<f64>,
    pub auroc: Vec<HorizonAuc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub endpoint: Endpoint,
    pub n_patients: usize,
    pub n_events: usize,
    pub rows: Vec<ModelMetrics>,
}

/// C-index with bootstrap interval, median-split log-rank test and horizon
/// AUROC with DeLong interval for one risk vector.
pub fn model_metrics(
    model: &str,
    risks: &[f64],
    outcomes: &[SurvivalOutcome],
    n_bootstrap: usize,
    horizons_years: &[f64],
    seed: u64,
) -> Result<ModelMetrics> {
    if risks.len() != outcomes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} risks for {} outcomes",
            risks.len(),
            outcomes.len()
        )));
    }
    let cindex = concordance_index(risks, outcomes)?;
    let ci = bootstrap_ci(
        risks.len(),
        |idx| {
            let r: Vec<f64> = idx.iter().map(|&i| risks[i]).collect();
            let o: Vec<SurvivalOutcome> = idx.iter().map(|&i| outcomes[i]).collect();
            concordance_index(&r, &o)
        },
        n_bootstrap,
        seed,
    )?;
    let groups = median_split(risks);
    let pick = |g: RiskGroup| -> Vec<SurvivalOutcome> {
        groups.iter().zip(outcomes).filter(|(x, _)| **x == g).map(|(_, o)| *o).collect()
    };
    let (high, low) = (pick(RiskGroup::High), pick(RiskGroup::Low));
    let lr = logrank_test(&high, &low).ok();
    let auroc = horizons_years
        .iter()
        .map(|&h| {
            let (idx, labels) = horizon_labels(outcomes, h).included();
            let s: Vec<f64> = idx.iter().map(|&i| risks[i]).collect();
            let n_positive = labels.iter().filter(|&&l| l).count();
            let d = delong(&s, None, &labels).ok();
            HorizonAuc {
                horizon_years: h,
                n_included: labels.len(),
                n_positive,
                auc: d.as_ref().map(|d| d.auc),
                ci_lo: d.as_ref().map(|d| d.ci_lo),
                ci_hi: d.as_ref().map(|d| d.ci_hi),
            }
        })
        .collect();
    Ok(ModelMetrics {
        model: model.to_string(),
        cindex,
        cindex_lo: ci.lo,
        cindex_hi: ci.hi,
        n_high: high.len(),
        n_low: low.len(),
        logrank_chi2: lr.map(|l| l.chi2),
        logrank_p: lr.map(|l| l.p),
        auroc,
    })
}

/// [`model_metrics`] for every modality and both fusions.
pub fn evaluate(
    pooled: &PooledPredictions,
    endpoint: Endpoint,
    n_bootstrap: usize,
    horizons_years: &[f64],
    seed: u64,
) -> Result<MetricsReport> {
    let rows = pooled
        .model_names()
        .iter()
        .enumerate()
        .map(|(k, model)| {
            model_metrics(
                model,
                &pooled.model_scores(k),
                &pooled.outcomes,
                n_bootstrap,
                horizons_years,
                derive_seed(seed, &[STREAM_BOOT, k as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        endpoint,
        n_patients: pooled.len(),
        n_events: count_events(&pooled.outcomes),
        rows,
    })
}

#[derive(Clone, Debug)]
pub struct CvRun {
    pub endpoint: Endpoint,
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldResult>,
    pub pooled: PooledPredictions,
    pub report: MetricsReport,
}

/// Full cross-validation on one endpoint. Folds run in parallel on the
/// current rayon pool; every random draw is keyed by the master seed and the
/// fold index, so the result does not depend on the pool size.
pub fn run_cv(cohort: &AlignedCohort, endpoint: Endpoint, cfg: &CvConfig) -> Result<CvRun> {
    let assignment = kfold(&cohort.patient_ids, cfg.n_folds, derive_seed(cfg.seed, &[STREAM_FOLDS]))?;
    let results: Vec<Result<FoldResult>> = (0..cfg.n_folds)
        .into_par_iter()
        .map(|f| run_fold(cohort, &assignment, f, endpoint, cfg))
        .collect();
    let mut folds = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(f) => folds.push(f),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        for e in &failures[1..] {
            log::error!("{e}");
        }
        return Err(failures.remove(0));
    }
    if cfg.weight_mode == WeightMode::Global {
        let names = folds[0].weights.modality_names.clone();
        let per_fold: Vec<Vec<f64>> = folds.iter().map(|f| f.weights.p_val.clone()).collect();
        let gw = global_weights(&names, &per_fold)?;
        for f in &mut folds {
            f.fused = fuse_risks(&f.scores, &gw)?;
            f.weights = gw.clone();
        }
    }
    let pooled = aggregate(&folds)?;
    let report = evaluate(&pooled, endpoint, cfg.n_bootstrap, &cfg.horizons_years, cfg.seed)?;
    Ok(CvRun {
        endpoint,
        assignment,
        folds,
        pooled,
        report,
    })
}

/// Provenance record of a cross-validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config_digest: String,
    pub modalities: Vec<String>,
    /// Fold of every patient, per endpoint.
    pub folds: BTreeMap<Endpoint, BTreeMap<String, usize>>,
}

impl RunManifest {
    pub fn new(seed: u64, config_digest: String, runs: &[CvRun]) -> Self {
        let modalities = runs
            .first()
            .map(|r| r.pooled.modality_names.clone())
            .unwrap_or_default();
        let folds = runs
            .iter()
            .map(|r| {
                let a = &r.assignment;
                (
                    r.endpoint,
                    a.patient_ids.iter().cloned().zip(a.fold_of.iter().copied()).collect(),
                )
            })
            .collect();
        Self {
            seed,
            config_digest,
            modalities,
            folds,
        }
    }
}
