//! Run outputs: manifest and fold JSON, pooled predictions, metrics table,
//! Kaplan–Meier and ROC curve data (CSV) with simple SVG renderings.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{CvRun, PooledPredictions, RunManifest, MMEM};
use crate::datamodel::{Endpoint, SurvivalOutcome};
use crate::error::{Error, Result};
use crate::metrics::{horizon_labels, km_curve, median_split, roc_curve, RiskGroup};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KmRow {
    pub endpoint: Endpoint,
    pub model: String,
    pub group: RiskGroup,
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocRow {
    pub endpoint: Endpoint,
    pub model: String,
    pub horizon_years: f64,
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Median-split Kaplan–Meier steps of every model, each curve starting at
/// (0, 1).
pub fn km_rows(pooled: &PooledPredictions, endpoint: Endpoint) -> Vec<KmRow> {
    let mut rows = Vec::new();
    for (k, model) in pooled.model_names().into_iter().enumerate() {
        let groups = median_split(&pooled.model_scores(k));
        for g in [RiskGroup::High, RiskGroup::Low] {
            let o: Vec<SurvivalOutcome> = groups
                .iter()
                .zip(&pooled.outcomes)
                .filter(|(x, _)| **x == g)
                .map(|(_, o)| *o)
                .collect();
            let Ok(c) = km_curve(&o) else { continue };
            rows.push(KmRow {
                endpoint,
                model: model.clone(),
                group: g,
                time: 0.0,
                survival: 1.0,
                at_risk: o.len(),
                events: 0,
            });
            for i in 0..c.times.len() {
                rows.push(KmRow {
                    endpoint,
                    model: model.clone(),
                    group: g,
                    time: c.times[i],
                    survival: c.survival[i],
                    at_risk: c.at_risk[i],
                    events: c.events[i],
                });
            }
        }
    }
    rows
}

/// ROC points per model and horizon; horizons with an empty class are skipped.
pub fn roc_rows(pooled: &PooledPredictions, endpoint: Endpoint, horizons_years: &[f64]) -> Vec<RocRow> {
    let mut rows = Vec::new();
    for (k, model) in pooled.model_names().into_iter().enumerate() {
        let scores = pooled.model_scores(k);
        for &h in horizons_years {
            let (idx, labels) = horizon_labels(&pooled.outcomes, h).included();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let Ok(pts) = roc_curve(&s, &labels) else { continue };
            rows.extend(pts.into_iter().map(|(fpr, tpr, threshold)| RocRow {
                endpoint,
                model: model.clone(),
                horizon_years: h,
                threshold,
                fpr,
                tpr,
            }));
        }
    }
    rows
}

fn csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `patient_id, fold, time, event, <modality>..., mmem, mmem_uniform`.
pub fn write_pooled_csv(path: &Path, pooled: &PooledPredictions) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["patient_id".to_string(), "fold".into(), "time".into(), "event".into()];
    header.extend(pooled.model_names());
    w.write_record(&header)?;
    let cols: Vec<Vec<f64>> = (0..pooled.model_names().len()).map(|k| pooled.model_scores(k)).collect();
    for i in 0..pooled.len() {
        let o = pooled.outcomes[i];
        let mut rec = vec![
            pooled.patient_ids[i].clone(),
            pooled.folds[i].to_string(),
            o.time.to_string(),
            (o.event as u8).to_string(),
        ];
        rec.extend(cols.iter().map(|c| c[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 8] = ["#1b6ca8", "#d1495b", "#2a9d8f", "#e9a03b", "#6a4c93", "#4a4e69", "#8ab17d", "#333333"];

fn svg_frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        W / 2.0,
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
    );
    s
}

fn to_px(x: f64, y: f64, x_max: f64) -> (f64, f64) {
    let px = PAD + x / x_max * (W - 2.0 * PAD);
    let py = H - PAD - y * (H - 2.0 * PAD);
    (px, py)
}

fn polyline(s: &mut String, pts: &[(f64, f64)], color: &str, label: &str, slot: usize) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
        coords.join(" ")
    );
    let ly = PAD + 14.0 * slot as f64;
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{ly}\" fill=\"{color}\">{label}</text>",
        W - PAD - 110.0
    );
}

/// Step plot of the fused model's high- and low-risk curves.
pub fn write_km_svg(path: &Path, rows: &[KmRow], model: &str) -> Result<()> {
    let sel: Vec<&KmRow> = rows.iter().filter(|r| r.model == model).collect();
    let t_max = sel.iter().map(|r| r.time).fold(1.0, f64::max);
    let title = sel.first().map(|r| format!("{} {}", r.endpoint, model)).unwrap_or_default();
    let mut s = svg_frame(&title, "time (days)", "survival");
    for (slot, g) in [RiskGroup::High, RiskGroup::Low].into_iter().enumerate() {
        let mut pts = Vec::new();
        let mut prev: Option<f64> = None;
        for r in sel.iter().filter(|r| r.group == g) {
            if let Some(p) = prev {
                pts.push(to_px(r.time, p, t_max));
            }
            pts.push(to_px(r.time, r.survival, t_max));
            prev = Some(r.survival);
        }
        if let Some(p) = prev {
            pts.push(to_px(t_max, p, t_max));
        }
        let label = match g {
            RiskGroup::High => "high risk",
            RiskGroup::Low => "low risk",
        };
        polyline(&mut s, &pts, COLORS[slot], label, slot);
    }
    s.push_str("</svg>\n");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// One ROC curve per model at the given horizon.
pub fn write_roc_svg(path: &Path, rows: &[RocRow], horizon_years: f64) -> Result<()> {
    let sel: Vec<&RocRow> = rows.iter().filter(|r| r.horizon_years == horizon_years).collect();
    let title = sel
        .first()
        .map(|r| format!("{} ROC at {horizon_years} years", r.endpoint))
        .unwrap_or_default();
    let mut s = svg_frame(&title, "false positive rate", "true positive rate");
    let mut models: Vec<&str> = Vec::new();
    for r in &sel {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    for (slot, m) in models.iter().enumerate() {
        let pts: Vec<(f64, f64)> = sel
            .iter()
            .filter(|r| r.model == *m)
            .map(|r| to_px(r.fpr, r.tpr, 1.0))
            .collect();
        polyline(&mut s, &pts, COLORS[slot % COLORS.len()], m, slot);
    }
    s.push_str("</svg>\n");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Serialize)]
struct MetricsCsvRow<'a> {
    endpoint: Endpoint,
    model: &'a str,
    cindex: f64,
    cindex_lo: f64,
    cindex_hi: f64,
    logrank_chi2: Option<f64>,
    logrank_p: Option<f64>,
    horizon_years: Option<f64>,
    auroc: Option<f64>,
    auroc_lo: Option<f64>,
    auroc_hi: Option<f64>,
}

/// Writes every artefact of a run under `dir`; returns the written paths.
pub fn write_cv_outputs(dir: &Path, manifest: &RunManifest, runs: &[CvRun], horizons_years: &[f64]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("folds")).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let p = dir.join("manifest.json");
    write_json(&p, manifest)?;
    written.push(p);

    let mut metric_rows = Vec::new();
    for run in runs {
        let ep = run.endpoint;
        for f in &run.folds {
            let p = dir.join("folds").join(format!("{ep}_fold{}.json", f.fold));
            write_json(&p, f)?;
            written.push(p);
        }
        let p = dir.join(format!("{ep}_pooled.csv"));
        write_pooled_csv(&p, &run.pooled)?;
        written.push(p);

        let km = km_rows(&run.pooled, ep);
        let p = dir.join(format!("{ep}_km.csv"));
        csv_rows(&p, &km)?;
        written.push(p);
        let p = dir.join(format!("{ep}_km.svg"));
        write_km_svg(&p, &km, MMEM)?;
        written.push(p);

        let roc = roc_rows(&run.pooled, ep, horizons_years);
        let p = dir.join(format!("{ep}_roc.csv"));
        csv_rows(&p, &roc)?;
        written.push(p);
        for &h in horizons_years {
            let p = dir.join(format!("{ep}_roc_{h}y.svg"));
            write_roc_svg(&p, &roc, h)?;
            written.push(p);
        }

        for m in &run.report.rows {
            let base = MetricsCsvRow {
                endpoint: ep,
                model: &m.model,
                cindex: m.cindex,
                cindex_lo: m.cindex_lo,
                cindex_hi: m.cindex_hi,
                logrank_chi2: m.logrank_chi2,
                logrank_p: m.logrank_p,
                horizon_years: None,
                auroc: None,
                auroc_lo: None,
                auroc_hi: None,
            };
            if m.auroc.is_empty() {
                metric_rows.push(base);
            }
            for a in &m.auroc {
                metric_rows.push(MetricsCsvRow {
                    horizon_years: Some(a.horizon_years),
                    auroc: a.auc,
                    auroc_lo: a.ci_lo,
                    auroc_hi: a.ci_hi,
                    ..base
                });
            }
        }
    }
    let reports: Vec<_> = runs.iter().map(|r| &r.report).collect();
    let p = dir.join("metrics.json");
    write_json(&p, &reports)?;
    written.push(p);
    let p = dir.join("metrics.csv");
    csv_rows(&p, &metric_rows)?;
    written.push(p);
    Ok(written)
}
