//! Hypothesis tests (McNemar-Bowker, DeLong, kappa) and the special
//! functions behind their p-values.

mod bootstrap;
mod hypothesis;
mod special;

use thiserror::Error;

pub use bootstrap::{bootstrap_auc, bootstrap_auc_test, BootstrapAuc};
pub use hypothesis::{
    bowker_from_table, bowker_test, delong_auc_cov, delong_test, delong_test_class,
    delong_test_micro, kappa_test, midranks, BowkerDf, DeLongCov, PairedPredictions, TestResult,
    DELONG_DEGENERATE_VAR,
};
pub use special::{chi2_sf, gamma_p, gamma_q, ln_gamma, std_normal_cdf, two_sided_normal_p};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("scores must be finite")]
    NonFinite,
    #[error("need at least 2 positives and 2 negatives (have {positives} and {negatives})")]
    TooFewPerClass { positives: usize, negatives: usize },
    #[error("need at least 2 bootstrap replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("degenerate: {0}")]
    Degenerate(String),
}
