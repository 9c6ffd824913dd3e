use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::datamodel::SurvivalOutcome;
use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HorizonLabel {
    Positive,
    Negative,
    Excluded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonLabels {
    pub horizon_years: f64,
    pub labels: Vec<HorizonLabel>,
}

impl HorizonLabels {
    /// Indices and boolean labels of the non-excluded patients.
    pub fn included(&self) -> (Vec<usize>, Vec<bool>) {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                HorizonLabel::Positive => Some((i, true)),
                HorizonLabel::Negative => Some((i, false)),
                HorizonLabel::Excluded => None,
            })
            .unzip()
    }
}

/// Event by the horizon → positive; follow-up beyond the horizon → negative;
/// censored at or before the horizon → excluded. Times are in days.
pub fn horizon_labels(outcomes: &[SurvivalOutcome], horizon_years: f64) -> HorizonLabels {
    let h = horizon_years * DAYS_PER_YEAR;
    let labels = outcomes
        .iter()
        .map(|o| {
            if o.time > h {
                HorizonLabel::Negative
            } else if o.event {
                HorizonLabel::Positive
            } else {
                HorizonLabel::Excluded
            }
        })
        .collect();
    HorizonLabels {
        horizon_years,
        labels,
    }
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn split_classes(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Undefined("AUROC needs both classes".into()));
    }
    Ok((pos, neg))
}

/// AUC from the pooled midrank sum of the positives (Mann–Whitney U).
fn auc_from_ranks(pooled_ranks: &[f64], m: usize, n: usize) -> f64 {
    let rank_sum: f64 = pooled_ranks[..m].iter().sum();
    (rank_sum - (m * (m + 1)) as f64 / 2.0) / (m * n) as f64
}

/// Probability that a random positive outscores a random negative (ties ½).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = split_classes(scores, labels)?;
    let pooled: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    Ok(auc_from_ranks(&midranks(&pooled), pos.len(), neg.len()))
}

/// (fpr, tpr, threshold) points, from the strictest threshold down.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = split_classes(scores, labels)?;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0, f64::INFINITY)];
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64;
        pts.push((fp / neg.len() as f64, tp / pos.len() as f64, t));
    }
    Ok(pts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelongComparison {
    pub auc_b: f64,
    pub var_b: f64,
    pub covariance: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delong {
    pub auc: f64,
    pub var: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub comparison: Option<DelongComparison>,
}

struct Placements {
    auc: f64,
    /// One per positive.
    v10: Vec<f64>,
    /// One per negative.
    v01: Vec<f64>,
}

fn placements(pos: &[f64], neg: &[f64]) -> Placements {
    let (m, n) = (pos.len(), neg.len());
    let pooled: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let tz = midranks(&pooled);
    let tx = midranks(pos);
    let ty = midranks(neg);
    let v10 = (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect();
    let v01 = (0..n).map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64).collect();
    Placements {
        auc: auc_from_ranks(&tz, m, n),
        v10,
        v01,
    }
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k as f64;
    let mb = b.iter().sum::<f64>() / k as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1) as f64
}

/// DeLong structural-components variance of the AUC with a 95% normal CI,
/// and the paired test against a second score vector when given.
pub fn delong(scores_a: &[f64], scores_b: Option<&[f64]>, labels: &[bool]) -> Result<Delong> {
    let (pa, na) = split_classes(scores_a, labels)?;
    let a = placements(&pa, &na);
    let (m, n) = (pa.len() as f64, na.len() as f64);
    let var_a = cov(&a.v10, &a.v10) / m + cov(&a.v01, &a.v01) / n;
    let half = 1.96 * var_a.max(0.0).sqrt();

    let comparison = match scores_b {
        None => None,
        Some(sb) => {
            let (pb, nb) = split_classes(sb, labels)?;
            let b = placements(&pb, &nb);
            let var_b = cov(&b.v10, &b.v10) / m + cov(&b.v01, &b.v01) / n;
            let covariance = cov(&a.v10, &b.v10) / m + cov(&a.v01, &b.v01) / n;
            let var_diff = var_a + var_b - 2.0 * covariance;
            let diff = a.auc - b.auc;
            let (z, p) = if var_diff > 1e-300 {
                let z = diff / var_diff.sqrt();
                (z, erfc(z.abs() / std::f64::consts::SQRT_2))
            } else if diff == 0.0 {
                (0.0, 1.0)
            } else {
                (diff.signum() * f64::INFINITY, 0.0)
            };
            Some(DelongComparison {
                auc_b: b.auc,
                var_b,
                covariance,
                z,
                p,
            })
        }
    };
    Ok(Delong {
        auc: a.auc,
        var: var_a,
        ci_lo: (a.auc - half).max(0.0),
        ci_hi: (a.auc + half).min(1.0),
        comparison,
    })
}
