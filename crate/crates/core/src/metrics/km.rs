use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::datamodel::SurvivalOutcome;
use crate::error::{Error, Result};

/// Product-limit survival curve, one step per distinct event time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// S(t), right-continuous; 1 before the first event.
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }
}

/// Kaplan–Meier estimator. Patients censored at an event time count as at
/// risk at that time.
pub fn km_curve(outcomes: &[SurvivalOutcome]) -> Result<KmCurve> {
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("Kaplan-Meier needs at least one patient".into()));
    }
    let mut sorted: Vec<SurvivalOutcome> = outcomes.to_vec();
    sorted.sort_by(|a, b| a.time.total_cmp(&b.time));
    let n = sorted.len();
    let mut curve = KmCurve {
        times: vec![],
        survival: vec![],
        at_risk: vec![],
        events: vec![],
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = sorted[i].time;
        let j = i + sorted[i..].partition_point(|o| o.time == t);
        let d = sorted[i..j].iter().filter(|o| o.event).count();
        if d > 0 {
            let at_risk = n - i;
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
        }
        i = j;
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi2: f64,
    pub p: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

/// Two-group log-rank test with hypergeometric variance; p from χ²(1).
pub fn logrank_test(group_a: &[SurvivalOutcome], group_b: &[SurvivalOutcome]) -> Result<LogRank> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::InvalidArgument("log-rank test needs two nonempty groups".into()));
    }
    let mut event_times: Vec<f64> = group_a
        .iter()
        .chain(group_b)
        .filter(|o| o.event)
        .map(|o| o.time)
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    let mut observed = 0.0;
    let mut expected = 0.0;
    let mut variance = 0.0;
    for &t in &event_times {
        let at = |g: &[SurvivalOutcome]| g.iter().filter(|o| o.time >= t).count() as f64;
        let ev = |g: &[SurvivalOutcome]| g.iter().filter(|o| o.event && o.time == t).count() as f64;
        let (na, nb) = (at(group_a), at(group_b));
        let (da, db) = (ev(group_a), ev(group_b));
        let n = na + nb;
        let d = da + db;
        observed += da;
        expected += d * na / n;
        if n > 1.0 {
            variance += d * (na / n) * (1.0 - na / n) * (n - d) / (n - 1.0);
        }
    }
    let diff = observed - expected;
    let chi2 = if variance > 0.0 { diff * diff / variance } else { 0.0 };
    let p = if chi2 > 0.0 {
        ChiSquared::new(1.0).expect("valid dof").sf(chi2)
    } else {
        1.0
    };
    Ok(LogRank {
        chi2,
        p,
        observed_a: observed,
        expected_a: expected,
        variance,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskGroup {
    Low,
    High,
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// High iff risk is strictly above the median; values equal to it go low.
pub fn median_split(risks: &[f64]) -> Vec<RiskGroup> {
    if risks.is_empty() {
        return vec![];
    }
    let m = median(risks);
    risks
        .iter()
        .map(|&r| if r > m { RiskGroup::High } else { RiskGroup::Low })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outs(times: &[f64], events: &[bool]) -> Vec<SurvivalOutcome> {
        times
            .iter()
            .zip(events)
            .map(|(&time, &event)| SurvivalOutcome { time, event })
            .collect()
    }

    #[test]
    fn km_without_censoring_is_empirical() {
        let c = km_curve(&outs(&[1.0, 2.0, 3.0], &[true; 3])).unwrap();
        let expect = [2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (s, e) in c.survival.iter().zip(expect) {
            assert!((s - e).abs() < 1e-15);
        }
    }

    #[test]
    fn km_with_censoring_hand_product() {
        let c = km_curve(&outs(&[1.0, 2.0, 3.0], &[true, false, true])).unwrap();
        assert_eq!(c.times, vec![1.0, 3.0]);
        assert!((c.survival[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.survival[1], 0.0);
        assert_eq!(c.at_risk, vec![3, 1]);
        assert!((c.survival_at(2.5) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn km_all_censored_has_no_steps() {
        let c = km_curve(&outs(&[1.0, 2.0], &[false, false])).unwrap();
        assert!(c.times.is_empty());
        assert_eq!(c.survival_at(10.0), 1.0);
        assert!(km_curve(&[]).is_err());
    }

    #[test]
    fn logrank_hand_example() {
        let a = outs(&[1.0, 2.0], &[true, true]);
        let b = outs(&[3.0, 4.0], &[true, true]);
        let r = logrank_test(&a, &b).unwrap();
        assert!((r.observed_a - r.expected_a - 7.0 / 6.0).abs() < 1e-12);
        assert!((r.variance - (0.25 + 2.0 / 9.0)).abs() < 1e-12);
        assert!((r.chi2 - 2.88).abs() < 0.01);
    }

    #[test]
    fn logrank_identical_groups() {
        let a = outs(&[1.0, 2.0, 5.0], &[true, false, true]);
        let r = logrank_test(&a, &a).unwrap();
        assert_eq!(r.chi2, 0.0);
        assert_eq!(r.p, 1.0);
        assert!(logrank_test(&a, &[]).is_err());
    }

    #[test]
    fn median_split_examples() {
        use RiskGroup::*;
        assert_eq!(median_split(&[1.0, 2.0, 3.0, 4.0]), vec![Low, Low, High, High]);
        assert_eq!(median_split(&[5.0; 4]), vec![Low; 4]);
        assert_eq!(median_split(&[1.0, 2.0, 3.0]), vec![Low, Low, High]);
    }
}
