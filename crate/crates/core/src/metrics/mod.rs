//! Censored-data evaluation: C-index with bootstrap intervals, Kaplan–Meier
//! curves with the log-rank test, median-risk stratification, horizon AUROC
//! with DeLong intervals, and Welch's t-test.

mod bootstrap;
mod concordance;
mod km;
mod roc;
mod ttest;

pub use bootstrap::{bootstrap_ci, percentile, BootstrapCi};
pub use concordance::{concordance_counts, concordance_index, ConcordanceCounts};
pub use km::{km_curve, logrank_test, median, median_split, KmCurve, LogRank, RiskGroup};
pub(crate) use roc::midranks;
pub use roc::{
    auroc, delong, horizon_labels, roc_curve, Delong, DelongComparison, HorizonLabel,
    HorizonLabels, DAYS_PER_YEAR,
};
pub use ttest::{two_sample_t, TTest};
