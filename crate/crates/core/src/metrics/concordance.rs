use crate::datamodel::SurvivalOutcome;
use crate::error::{Error, Result};

/// Pair counts behind Harrell's C.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConcordanceCounts {
    pub concordant: u64,
    pub tied_risk: u64,
    pub comparable: u64,
}

impl ConcordanceCounts {
    pub fn index(&self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(Error::Undefined("no comparable pairs for the C-index".into()));
        }
        Ok((self.concordant as f64 + 0.5 * self.tied_risk as f64) / self.comparable as f64)
    }
}

/// Harrell's C-index: a pair (i, j) is comparable when i had the event and
/// `t_i < t_j`; it is concordant when `risk_i > risk_j` and half-counted when
/// the risks are equal. Pairs tied in time are not comparable.
pub fn concordance_index(risks: &[f64], outcomes: &[SurvivalOutcome]) -> Result<f64> {
    concordance_counts(risks, outcomes)?.index()
}

/// O(n log n) pair counting with a Fenwick tree over risk ranks.
pub fn concordance_counts(
    risks: &[f64],
    outcomes: &[SurvivalOutcome],
) -> Result<ConcordanceCounts> {
    if risks.len() != outcomes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} risks for {} outcomes",
            risks.len(),
            outcomes.len()
        )));
    }
    if risks.iter().any(|r| r.is_nan()) {
        return Err(Error::NonFinite("risk scores".into()));
    }
    let n = risks.len();

    let mut levels: Vec<f64> = risks.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let rank = |r: f64| levels.partition_point(|&l| l < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| outcomes[b].time.total_cmp(&outcomes[a].time));

    let mut tree = Fenwick::new(levels.len());
    let mut inserted = 0u64;
    let mut counts = ConcordanceCounts::default();
    let mut start = 0;
    while start < n {
        let t = outcomes[order[start]].time;
        let end = start + order[start..].partition_point(|&i| outcomes[i].time == t);
        // Everything already in the tree has a strictly later time.
        for &i in &order[start..end] {
            if outcomes[i].event {
                let r = rank(risks[i]);
                let below = tree.prefix(r);
                let equal = tree.prefix(r + 1) - below;
                counts.concordant += below;
                counts.tied_risk += equal;
                counts.comparable += inserted;
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    Ok(counts)
}

struct Fenwick {
    tree: Vec<u64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Self {
            tree: vec![0; n + 1],
        }
    }

    fn add(&mut self, idx: usize) {
        let mut i = idx + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< idx`.
    fn prefix(&self, idx: usize) -> u64 {
        let mut i = idx;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}
