use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_valid: usize,
    pub n_skipped: usize,
    /// Replicate values in replicate order (undefined replicates omitted).
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

/// Percentile bootstrap over `n_items` units resampled with replacement.
///
/// `metric` receives the resampled indices; replicates for which it returns
/// an error are skipped and counted. Replicate `k` draws from its own seeded
/// stream, so the result does not depend on the thread pool.
pub fn bootstrap_ci<F>(n_items: usize, metric: F, n_boot: usize, seed: u64) -> Result<BootstrapCi>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n_items == 0 || n_boot == 0 {
        return Err(Error::InvalidArgument("bootstrap needs items and replicates".into()));
    }
    let all: Vec<usize> = (0..n_items).collect();
    let point = metric(&all)?;
    let draws: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, &[k as u64]);
            let idx: Vec<usize> = (0..n_items).map(|_| rng.random_range(0..n_items)).collect();
            metric(&idx).ok().filter(|v| v.is_finite())
        })
        .collect();
    let replicates: Vec<f64> = draws.iter().flatten().copied().collect();
    let n_skipped = n_boot - replicates.len();
    if n_skipped * 2 > n_boot {
        return Err(Error::Undefined(format!(
            "{n_skipped} of {n_boot} bootstrap replicates were undefined"
        )));
    }
    let mut sorted = replicates.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        point,
        lo: percentile(&sorted, 2.5),
        hi: percentile(&sorted, 97.5),
        n_valid: replicates.len(),
        n_skipped,
        replicates,
    })
}

/// Linearly interpolated percentile of sorted data.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * pct / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_metric() {
        let ci = bootstrap_ci(10, |_| Ok(0.7), 1000, 1).unwrap();
        assert_eq!((ci.point, ci.lo, ci.hi), (0.7, 0.7, 0.7));
    }

    #[test]
    fn seeded_runs_repeat() {
        let data: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64).collect();
        let mean = |idx: &[usize]| Ok(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64);
        let a = bootstrap_ci(50, mean, 500, 3).unwrap();
        let b = bootstrap_ci(50, mean, 500, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.replicates, b.replicates);
        assert!(a.lo <= a.point && a.point <= a.hi);
    }

    #[test]
    fn mostly_undefined_is_an_error() {
        let r = bootstrap_ci(
            5,
            |idx| if idx.iter().all(|&i| i == 0) { Ok(1.0) } else { Err(Error::NoEvents) },
            100,
            0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&s, 50.0), 3.0);
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert!((percentile(&s, 2.5) - 1.1).abs() < 1e-12);
    }
}
