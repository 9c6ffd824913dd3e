//! Seeded synthetic cohorts with known generating models.
//!
//! Event times follow an exponential proportional-hazards model,
//! `T ~ Exp(λ·exp(xᵀβ))`, sampled by inverse transform; censoring is
//! uniform on `[0, c_max]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    align_modalities, write_cohort_csv, write_embedding_container, write_feature_csv, AlignedCohort,
    EmbeddingBag, Endpoint, EndpointSelector, FeatureTable, Modality, ModalityData, PatientOutcomes,
    SurvivalOutcome,
};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

const STREAM_COVARIATES: u64 = 0;
const STREAM_OS: u64 = 1;
const STREAM_CENSOR: u64 = 2;
const STREAM_DFS: u64 = 3;
const STREAM_MODALITY: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub beta: Vec<f64>,
    /// Baseline hazard per day.
    pub baseline_hazard: f64,
    /// Upper end of the uniform censoring window in days; `None` = no censoring.
    pub censor_max: Option<f64>,
    pub seed: u64,
}

fn check_common(n: usize, lambda: f64, censor_max: Option<f64>) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("n_patients must be positive".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("baseline hazard must be > 0, got {lambda}")));
    }
    if let Some(c) = censor_max {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!("censor_max must be > 0, got {c}")));
        }
    }
    Ok(())
}

pub fn patient_ids(n: usize) -> Vec<String> {
    let width = n.to_string().len().max(4);
    (1..=n).map(|i| format!("P{i:0width$}")).collect()
}

fn standard_normal_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, p), || StandardNormal.sample(rng))
}

/// Exponential event times by inverse transform, then uniform censoring.
fn draw_outcomes(
    eta: &[f64],
    lambda: f64,
    censor_max: Option<f64>,
    event_rng: &mut ChaCha8Rng,
    censor_rng: &mut ChaCha8Rng,
) -> Vec<SurvivalOutcome> {
    eta.iter()
        .map(|&e| {
            // 1 − U lies in (0, 1], so the log is finite.
            let u: f64 = 1.0 - event_rng.random::<f64>();
            let t = -u.ln() / (lambda * e.exp());
            match censor_max {
                None => SurvivalOutcome { time: t, event: true },
                Some(c) => {
                    let ct = censor_rng.random::<f64>() * c;
                    if t <= ct {
                        SurvivalOutcome { time: t, event: true }
                    } else {
                        SurvivalOutcome { time: ct, event: false }
                    }
                }
            }
        })
        .collect()
}

/// Standard-normal covariates `x0..x{p-1}` with outcomes from the generating model.
pub fn gen_linear_cox_cohort(spec: &CohortSpec) -> Result<(FeatureTable, Vec<SurvivalOutcome>)> {
    check_common(spec.n_patients, spec.baseline_hazard, spec.censor_max)?;
    let n = spec.n_patients;
    let p = spec.beta.len();
    let x = standard_normal_matrix(&mut stream_rng(spec.seed, &[STREAM_COVARIATES]), n, p);
    let eta: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&spec.beta).map(|(a, b)| a * b).sum())
        .collect();
    let outcomes = draw_outcomes(
        &eta,
        spec.baseline_hazard,
        spec.censor_max,
        &mut stream_rng(spec.seed, &[STREAM_OS]),
        &mut stream_rng(spec.seed, &[STREAM_CENSOR]),
    );
    let names = (0..p).map(|j| format!("x{j}")).collect();
    Ok((FeatureTable::from_numeric(patient_ids(n), names, x)?, outcomes))
}

/// P(T ≤ C) for `T ~ Exp(rate)` and `C ~ U[0, c]`.
pub fn analytic_event_rate(rate: f64, c: f64) -> f64 {
    let rc = rate * c;
    1.0 - (-(-rc).exp_m1()) / rc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagSpec {
    pub tiles_min: usize,
    pub tiles_max: usize,
    pub dim: usize,
    /// Standard deviation of the per-tile noise.
    pub tile_noise: f64,
}

impl Default for BagSpec {
    fn default() -> Self {
        Self {
            tiles_min: 16,
            tiles_max: 64,
            dim: 8,
            tile_noise: 0.5,
        }
    }
}

/// One bag per patient. Each patient gets a signal vector whose coordinate 0
/// is `planted[i]` and whose other coordinates are standard normal; every tile
/// is that vector plus independent N(0, tile_noise²) noise.
pub fn gen_bags(
    spec: &BagSpec,
    patient_ids: &[String],
    planted: &[f64],
    seed: u64,
) -> Result<Vec<EmbeddingBag>> {
    if spec.dim == 0 || spec.tiles_min == 0 || spec.tiles_min > spec.tiles_max {
        return Err(Error::InvalidArgument(format!(
            "bag spec needs dim > 0 and 1 <= tiles_min <= tiles_max, got {spec:?}"
        )));
    }
    if !(spec.tile_noise >= 0.0) {
        return Err(Error::InvalidArgument("tile_noise must be >= 0".into()));
    }
    if patient_ids.len() != planted.len() {
        return Err(Error::InvalidArgument("one planted value per patient required".into()));
    }
    patient_ids
        .iter()
        .zip(planted)
        .enumerate()
        .map(|(i, (id, &z))| {
            let mut rng = stream_rng(seed, &[i as u64]);
            let n_tiles = rng.random_range(spec.tiles_min..=spec.tiles_max);
            let mut signal: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            signal[0] = z;
            let vectors = Array2::from_shape_fn((n_tiles, spec.dim), |(_, k)| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                (signal[k] + spec.tile_noise * noise) as f32
            });
            EmbeddingBag::new(id.clone(), vectors, None)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SynthModalityKind {
    /// A table with one planted column `<name>_sig` followed by `n_noise`
    /// standard-normal columns `<name>_nXX`.
    Table { n_noise: usize },
    /// Embedding bags whose coordinate 0 carries the planted covariate.
    Bags(BagSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthModality {
    pub name: String,
    /// Log-hazard coefficient of this modality's planted covariate.
    pub beta: f64,
    #[serde(flatten)]
    pub kind: SynthModalityKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSpec {
    pub n_patients: usize,
    pub baseline_hazard: f64,
    pub censor_max: Option<f64>,
    /// DFS hazard relative to OS hazard.
    pub dfs_hazard_ratio: f64,
    pub seed: u64,
    pub modalities: Vec<SynthModality>,
}

impl Default for MultimodalSpec {
    fn default() -> Self {
        let table = |name: &str| SynthModality {
            name: name.into(),
            beta: 1.2,
            kind: SynthModalityKind::Table { n_noise: 8 },
        };
        Self {
            n_patients: 120,
            baseline_hazard: 1.0 / 1500.0,
            censor_max: Some(3650.0),
            dfs_hazard_ratio: 1.5,
            seed: 0,
            modalities: vec![
                table("clinical"),
                table("mrna"),
                SynthModality {
                    name: "wsi".into(),
                    beta: 1.2,
                    kind: SynthModalityKind::Bags(BagSpec::default()),
                },
            ],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCohort {
    pub patient_ids: Vec<String>,
    pub modalities: Vec<Modality>,
    pub outcomes: BTreeMap<String, PatientOutcomes>,
    /// `n × M` planted covariates, one column per modality.
    pub planted: Array2<f64>,
    pub linear_predictor: Vec<f64>,
}

impl SynthCohort {
    pub fn aligned(&self, endpoint: Endpoint) -> Result<AlignedCohort> {
        align_modalities(
            self.modalities.clone(),
            &EndpointSelector::new(endpoint).select(&self.outcomes),
        )
    }

    /// Writes `outcomes.csv`, one `<name>.csv` per table modality and one
    /// `<name>.emb` per bag modality; returns the written paths.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let create = |p: &Path| fs::File::create(p).map_err(|e| Error::io(p, e));

        let path = dir.join("outcomes.csv");
        let empty = FeatureTable::from_numeric(
            self.patient_ids.clone(),
            vec![],
            Array2::zeros((self.patient_ids.len(), 0)),
        )?;
        write_cohort_csv(create(&path)?, &empty, &self.outcomes)?;
        written.push(path);
        for m in &self.modalities {
            let path = match &m.data {
                ModalityData::Table(t) => {
                    let p = dir.join(format!("{}.csv", m.name));
                    write_feature_csv(create(&p)?, t)?;
                    p
                }
                ModalityData::Bags(b) => {
                    let p = dir.join(format!("{}.emb", m.name));
                    write_embedding_container(std::io::BufWriter::new(create(&p)?), b)?;
                    p
                }
            };
            written.push(path);
        }
        Ok(written)
    }
}

/// Cohort whose hazard is `λ·exp(Σ_m β_m z_m)` with one planted covariate
/// `z_m` per modality. With a single noise-free table modality this draws
/// exactly the same values as [`gen_linear_cox_cohort`].
pub fn gen_multimodal_cohort(spec: &MultimodalSpec) -> Result<SynthCohort> {
    check_common(spec.n_patients, spec.baseline_hazard, spec.censor_max)?;
    if spec.modalities.is_empty() {
        return Err(Error::InvalidArgument("at least one modality required".into()));
    }
    if !(spec.dfs_hazard_ratio > 0.0) {
        return Err(Error::InvalidArgument("dfs_hazard_ratio must be > 0".into()));
    }
    let n = spec.n_patients;
    let m = spec.modalities.len();
    let ids = patient_ids(n);
    let z = standard_normal_matrix(&mut stream_rng(spec.seed, &[STREAM_COVARIATES]), n, m);
    let eta: Vec<f64> = z
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(&spec.modalities).map(|(v, md)| v * md.beta).sum())
        .collect();
    let os = draw_outcomes(
        &eta,
        spec.baseline_hazard,
        spec.censor_max,
        &mut stream_rng(spec.seed, &[STREAM_OS]),
        &mut stream_rng(spec.seed, &[STREAM_CENSOR]),
    );
    let dfs = draw_outcomes(
        &eta,
        spec.baseline_hazard * spec.dfs_hazard_ratio,
        spec.censor_max,
        &mut stream_rng(spec.seed, &[STREAM_DFS]),
        &mut stream_rng(spec.seed, &[STREAM_CENSOR]),
    );
    let outcomes = ids
        .iter()
        .zip(os.iter().zip(&dfs))
        .map(|(id, (o, d))| (id.clone(), PatientOutcomes { os: Some(*o), dfs: Some(*d) }))
        .collect();

    let mut modalities = Vec::with_capacity(m);
    for (k, md) in spec.modalities.iter().enumerate() {
        let planted = z.column(k).to_vec();
        let mod_seed = crate::rng::derive_seed(spec.seed, &[STREAM_MODALITY, k as u64]);
        let data = match &md.kind {
            SynthModalityKind::Table { n_noise } => {
                let mut rng = stream_rng(mod_seed, &[]);
                let noise = standard_normal_matrix(&mut rng, n, *n_noise);
                let values = Array2::from_shape_fn((n, 1 + n_noise), |(i, j)| {
                    if j == 0 {
                        planted[i]
                    } else {
                        noise[[i, j - 1]]
                    }
                });
                let mut names = vec![format!("{}_sig", md.name)];
                names.extend((0..*n_noise).map(|j| format!("{}_n{j:02}", md.name)));
                ModalityData::Table(FeatureTable::from_numeric(ids.clone(), names, values)?)
            }
            SynthModalityKind::Bags(bag) => ModalityData::Bags(gen_bags(bag, &ids, &planted, mod_seed)?),
        };
        modalities.push(Modality {
            name: md.name.clone(),
            data,
        });
    }
    Ok(SynthCohort {
        patient_ids: ids,
        modalities,
        outcomes,
        planted: z,
        linear_predictor: eta,
    })
}
