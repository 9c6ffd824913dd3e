use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use survfuse::coxph::{fit_cox as fit_cox_model, CoxFitOptions, Ties};
use survfuse::cvharness::{config_digest, model_metrics, run_cv, write_cv_outputs, RunManifest};
use survfuse::datamodel::{
    align_modalities, parse_embedding_container, parse_feature_csv, read_cohort_csv, write_feature_csv,
    AlignedCohort, EmbeddingBag, EndpointSelector, FeatureTable, Modality, ModalityData, PatientOutcomes,
    RiskScoreTable,
};
use survfuse::deepcox::{save_checkpoint, train_deep_cox, DeepCoxConfig};
use survfuse::ensemble::{fuse_risks, modality_weights, uniform_weights};
use survfuse::featsel::forward_select;
use survfuse::preprocess::{draw_subsplits, fit_preprocess, PreprocessConfig, PreprocessReport};
use survfuse::rng::derive_seed;
use survfuse::synthgen::{gen_multimodal_cohort, MultimodalSpec};
use survfuse::wsiprep::{load_rgb, tile_image, write_tiles, WsiPrepConfig};

use crate::config::{InputKind, RunConfig};
use crate::{CliError, CohortArgs, Common};

type Result<T> = std::result::Result<T, CliError>;

fn out_dir(c: &Common, default: &str) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Problems reading an input file are configuration errors naming the path.
fn input<T>(path: &Path, r: survfuse::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("file not found: {}", path.display())))
    }
}

fn read_cohort(path: &Path) -> Result<BTreeMap<String, PatientOutcomes>> {
    require_file(path)?;
    let f = fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(input(path, read_cohort_csv(f))?.1)
}

fn read_table(path: &Path) -> Result<FeatureTable> {
    require_file(path)?;
    input(path, parse_feature_csv(path))
}

fn read_bags(path: &Path) -> Result<Vec<EmbeddingBag>> {
    require_file(path)?;
    input(path, parse_embedding_container(path))
}

/// One modality restricted to patients with an outcome, in id order.
fn align_one(m: Modality, args: &CohortArgs) -> Result<AlignedCohort> {
    let outcomes = read_cohort(&args.outcomes)?;
    Ok(align_modalities(vec![m], &EndpointSelector::new(args.endpoint).select(&outcomes))?)
}

fn table_of(c: &AlignedCohort) -> &FeatureTable {
    match &c.modalities[0].data {
        ModalityData::Table(t) => t,
        ModalityData::Bags(_) => unreachable!("aligned from a table"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(survfuse::Error::from)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_table(path: &Path, t: &FeatureTable) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(write_feature_csv(f, t)?)
}

fn risk_table(ids: Vec<String>, name: &str, risks: Vec<f64>) -> Result<FeatureTable> {
    let n = risks.len();
    let values = ndarray::Array2::from_shape_vec((n, 1), risks).expect("one column");
    Ok(FeatureTable::from_numeric(ids, vec![name.to_string()], values)?)
}

#[derive(Serialize)]
struct ImageError {
    file: String,
    error: String,
}

pub fn prep_wsi(c: &Common, dir: &Path, min_tissue: f64, threshold: Option<u8>, images: bool) -> Result<()> {
    if !(0.0..=1.0).contains(&min_tissue) {
        return Err(CliError::Config("--min-tissue must lie in [0, 1]".into()));
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("no PNG or TIFF images in {}", dir.display())));
    }
    let out = out_dir(c, "tiles")?;
    let cfg = WsiPrepConfig {
        manual_threshold: threshold,
        min_tissue_fraction: min_tissue,
        ..Default::default()
    };
    let results: Vec<(String, std::result::Result<usize, String>)> = files
        .par_iter()
        .map(|f| {
            let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let r = (|| -> Result<usize> {
                let img = load_rgb(f)?;
                let set = tile_image(&img, &name, &cfg)?;
                write_json(&out.join(format!("{stem}.tiles.json")), &set)?;
                if images {
                    write_tiles(&img, &set, &stem, &out.join(&stem), &cfg)?;
                }
                Ok(set.coords.len())
            })();
            (name, r.map_err(|e| e.to_string()))
        })
        .collect();
    let mut errors = Vec::new();
    for (name, r) in &results {
        match r {
            Ok(n) => println!("{name}: {n} tiles"),
            Err(e) => {
                eprintln!("{name}: {e}");
                errors.push(ImageError {
                    file: name.clone(),
                    error: e.clone(),
                });
            }
        }
    }
    write_json(&out.join("errors.json"), &errors)?;
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial {
            failed: errors.len(),
            total: results.len(),
        })
    }
}

pub fn cv(c: &Common, path: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.check_inputs(&base)?;
    let out = match (&c.out, &cfg.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => RunConfig::resolve(&base, o),
        (None, None) => PathBuf::from("results"),
    };
    fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;

    let outcomes = read_cohort(&RunConfig::resolve(&base, &cfg.outcomes))?;
    let modalities = cfg
        .modalities
        .iter()
        .map(|m| {
            let p = RunConfig::resolve(&base, &m.path);
            Ok(match m.kind {
                InputKind::Table => Modality::table(&m.name, read_table(&p)?),
                InputKind::Bags => Modality::bags(&m.name, read_bags(&p)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cv = cfg.cv.clone();
    cv.seed = cfg.seed;
    let mut runs = Vec::new();
    for &ep in &cfg.endpoints {
        let cohort = align_modalities(modalities.clone(), &EndpointSelector::new(ep).select(&outcomes))?;
        log::info!("{ep}: {} patients", cohort.len());
        runs.push(run_cv(&cohort, ep, &cv)?);
    }

    let mut recorded = cfg.clone();
    recorded.out = None;
    let manifest = RunManifest::new(cfg.seed, config_digest(&recorded)?, &runs);
    write_cv_outputs(&out, &manifest, &runs, &cv.horizons_years)?;
    fs::write(out.join("config.toml"), recorded.to_toml()?)
        .map_err(|e| CliError::Config(format!("cannot write config copy: {e}")))?;

    for run in &runs {
        println!("{} (n = {}, events = {})", run.endpoint, run.report.n_patients, run.report.n_events);
        for r in &run.report.rows {
            println!("  {:<16} C = {:.3} ({:.3}, {:.3})", r.model, r.cindex, r.cindex_lo, r.cindex_hi);
        }
    }
    Ok(())
}

pub fn synth(c: &Common, spec: Option<&Path>, n_patients: Option<usize>) -> Result<()> {
    let mut s = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<MultimodalSpec>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => MultimodalSpec::default(),
    };
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    if let Some(n) = n_patients {
        s.n_patients = n;
    }
    if s.n_patients == 0 {
        return Err(CliError::Config("n_patients: must be positive".into()));
    }
    let cohort = gen_multimodal_cohort(&s).map_err(|e| CliError::Config(e.to_string()))?;
    let out = out_dir(c, "synthetic")?;
    let written = cohort.write_dir(&out)?;
    let spec_text = toml::to_string(&s).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(out.join("synth_spec.toml"), spec_text).map_err(|e| CliError::Config(e.to_string()))?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn preprocess(
    c: &Common,
    features: &Path,
    cohort: &CohortArgs,
    n_splits: usize,
    missing_threshold: f64,
    corr_cutoff: f64,
) -> Result<()> {
    let aligned = align_one(Modality::table("features", read_table(features)?), cohort)?;
    let pc = PreprocessConfig {
        n_splits,
        missing_threshold,
        corr_cutoff,
        ..Default::default()
    };
    let splits = draw_subsplits(
        &aligned.outcomes,
        pc.n_splits,
        pc.val_fraction,
        pc.max_split_retries,
        c.seed.unwrap_or(0),
        cohort.endpoint.as_str(),
    )?;
    let (report, z) = fit_preprocess(table_of(&aligned), &aligned.outcomes, &splits, &pc)?;
    let out = out_dir(c, "preprocess")?;
    write_json(&out.join("preprocess_report.json"), &report)?;
    write_table(&out.join("preprocessed.csv"), &z)?;
    println!("{} columns kept, {} candidates", z.n_cols(), report.candidates.len());
    Ok(())
}

pub fn select(
    c: &Common,
    features: &Path,
    report: &Path,
    cohort: &CohortArgs,
    n_splits: usize,
    max_features: usize,
) -> Result<()> {
    require_file(report)?;
    let text = fs::read_to_string(report).map_err(|e| CliError::Config(format!("{}: {e}", report.display())))?;
    let rep: PreprocessReport =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", report.display())))?;
    let mut candidates = rep.candidates.clone();
    if candidates.is_empty() {
        candidates.extend(rep.screened.first().map(|s| s.column.clone()));
    }
    let aligned = align_one(Modality::table("features", read_table(features)?), cohort)?;
    let pc = PreprocessConfig::default();
    let splits = draw_subsplits(
        &aligned.outcomes,
        n_splits,
        pc.val_fraction,
        pc.max_split_retries,
        c.seed.unwrap_or(0),
        cohort.endpoint.as_str(),
    )?;
    let (trace, model) = forward_select(
        table_of(&aligned),
        &aligned.outcomes,
        &candidates,
        &splits,
        max_features,
        &pc.cox,
    )?;
    let out = out_dir(c, "select")?;
    write_json(&out.join("selection.json"), &trace)?;
    write_json(&out.join("cox_model.json"), &model)?;
    println!("selected {:?} (mean validation C = {:.3})", trace.optimal_set, trace.best_val_cindex);
    Ok(())
}

pub fn fit_cox(c: &Common, features: &Path, cohort: &CohortArgs, columns: Option<Vec<String>>, ties: Ties) -> Result<()> {
    let aligned = align_one(Modality::table("features", read_table(features)?), cohort)?;
    let t = table_of(&aligned);
    let t = match columns {
        Some(cols) => t.select_named(&cols).map_err(|e| CliError::Config(e.to_string()))?,
        None => t.clone(),
    };
    if t.missing().iter().any(|&m| m) {
        return Err(CliError::Config("feature table has missing values; run preprocess first".into()));
    }
    let opts = CoxFitOptions {
        ties,
        ..Default::default()
    };
    let model = fit_cox_model(t.values().view(), &t.column_names(), &aligned.outcomes, &opts)?;
    let out = out_dir(c, "cox")?;
    write_json(&out.join("cox_model.json"), &model)?;
    for (n, b) in model.feature_names.iter().zip(&model.beta) {
        println!("{n}\t{b:.6}");
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainingSummary<'a> {
    best_epoch: usize,
    val_loss: f64,
    val_cindex: f64,
    history: &'a [survfuse::deepcox::EpochLog],
}

pub fn fit_deep(c: &Common, bags: &Path, cohort: &CohortArgs, config: Option<&Path>, val_fraction: f64) -> Result<()> {
    let mut dcfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<DeepCoxConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => DeepCoxConfig::default(),
    };
    if let Some(s) = c.seed {
        dcfg.seed = s;
    }
    dcfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let aligned = align_one(Modality::bags("bags", read_bags(bags)?), cohort)?;
    let ModalityData::Bags(all) = &aligned.modalities[0].data else {
        unreachable!("aligned from bags")
    };
    let split = draw_subsplits(&aligned.outcomes, 1, val_fraction, 100, dcfg.seed, cohort.endpoint.as_str())?.remove(0);
    let pick = |rows: &[usize]| -> (Vec<EmbeddingBag>, Vec<_>) {
        (
            rows.iter().map(|&i| all[i].clone()).collect(),
            rows.iter().map(|&i| aligned.outcomes[i]).collect(),
        )
    };
    let (tb, to) = pick(&split.train);
    let (vb, vo) = pick(&split.val);
    let res = train_deep_cox(&tb, &to, &dcfg, &vb, &vo)?;
    let out = out_dir(c, "deep")?;
    save_checkpoint(&res.model, &out.join("deep_model.dcx"))?;
    write_json(
        &out.join("training.json"),
        &TrainingSummary {
            best_epoch: res.best_epoch,
            val_loss: res.val_loss,
            val_cindex: res.val_cindex,
            history: &res.history,
        },
    )?;
    let risks = res.model.predict(all)?;
    write_table(&out.join("risks.csv"), &risk_table(aligned.patient_ids.clone(), "risk", risks)?)?;
    println!("best epoch {} (validation C = {:.3})", res.best_epoch, res.val_cindex);
    Ok(())
}

pub fn evaluate(c: &Common, risks: &Path, cohort: &CohortArgs, horizons: &[f64], n_bootstrap: usize) -> Result<()> {
    if n_bootstrap == 0 || horizons.iter().any(|h| !(*h > 0.0)) {
        return Err(CliError::Config("--n-bootstrap and --horizons must be positive".into()));
    }
    let aligned = align_one(Modality::table("risks", read_table(risks)?), cohort)?;
    let t = table_of(&aligned);
    if t.missing().iter().any(|&m| m) {
        return Err(CliError::Config(format!("{}: missing risk values", risks.display())));
    }
    let seed = c.seed.unwrap_or(0);
    let rows = t
        .column_names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            model_metrics(
                name,
                &t.column(j).to_vec(),
                &aligned.outcomes,
                n_bootstrap,
                horizons,
                derive_seed(seed, &[j as u64]),
            )
        })
        .collect::<survfuse::Result<Vec<_>>>()?;
    let out = out_dir(c, "evaluate")?;
    write_json(&out.join("metrics.json"), &rows)?;
    for r in &rows {
        println!("{:<16} C = {:.3} ({:.3}, {:.3})", r.model, r.cindex, r.cindex_lo, r.cindex_hi);
    }
    Ok(())
}

pub fn fuse(c: &Common, scores: &Path, p_val: Option<Vec<f64>>, uniform: bool) -> Result<()> {
    let t = read_table(scores)?;
    if t.missing().iter().any(|&m| m) {
        return Err(CliError::Config(format!("{}: missing scores", scores.display())));
    }
    let names = t.column_names();
    let table = RiskScoreTable::new(t.patient_ids().to_vec(), names.clone(), t.values().clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let w = match (uniform, p_val) {
        (true, _) => uniform_weights(&names)?,
        (false, Some(p)) => modality_weights(&names, &p).map_err(|e| CliError::Config(format!("--p-val: {e}")))?,
        (false, None) => return Err(CliError::Config("give --p-val or --uniform".into())),
    };
    let fused = fuse_risks(&table, &w)?;
    let out = out_dir(c, "fuse")?;
    write_json(&out.join("weights.json"), &w)?;
    write_table(&out.join("fused.csv"), &risk_table(table.patient_ids.clone(), "fused", fused)?)?;
    for (n, x) in names.iter().zip(&w.weights) {
        println!("{n}\t{x:.6}");
    }
    Ok(())
}
