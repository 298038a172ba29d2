//! Stratified bootstrap of (paired) AUCs.
//!
//! Replicate `r` draws from its own ChaCha stream of the root seed, and the
//! per-replicate results are reduced in index order, so the output does not
//! depend on how many worker threads ran the replicates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::hypothesis::{check_binary_inputs, midranks, TestResult};
use super::special::two_sided_normal_p;
use super::StatsError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapAuc {
    pub replicates: usize,
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

impl BootstrapAuc {
    pub fn var_diff(&self) -> f64 {
        self.var_a + self.var_b - 2.0 * self.cov
    }
}

/// Mann-Whitney AUC from a sample of positive and negative scores.
fn rank_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all = Vec::with_capacity(pos.len() + neg.len());
    all.extend_from_slice(pos);
    all.extend_from_slice(neg);
    let ranks = midranks(&all);
    let m = pos.len() as f64;
    let n = neg.len() as f64;
    let rank_sum: f64 = ranks[..pos.len()].iter().sum();
    (rank_sum - m * (m + 1.0) / 2.0) / (m * n)
}

pub(crate) fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Resamples positives and negatives separately (with replacement) and
/// returns the empirical variances and covariance of the two AUCs.
pub fn bootstrap_auc(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
    replicates: usize,
    seed: u64,
) -> Result<BootstrapAuc, StatsError> {
    let (pos, neg) = check_binary_inputs(scores_a, scores_b, labels)?;
    if replicates < 2 {
        return Err(StatsError::TooFewReplicates(replicates));
    }
    let pairs: Vec<(f64, f64)> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r);
            let pi: Vec<usize> = (0..pos.len()).map(|_| pos[rng.random_range(0..pos.len())]).collect();
            let ni: Vec<usize> = (0..neg.len()).map(|_| neg[rng.random_range(0..neg.len())]).collect();
            let pick = |s: &[f64], idx: &[usize]| idx.iter().map(|&i| s[i]).collect::<Vec<_>>();
            (
                rank_auc(&pick(scores_a, &pi), &pick(scores_a, &ni)),
                rank_auc(&pick(scores_b, &pi), &pick(scores_b, &ni)),
            )
        })
        .collect();

    let r = replicates as f64;
    let mean_a = pairs.iter().map(|p| p.0).sum::<f64>() / r;
    let mean_b = pairs.iter().map(|p| p.1).sum::<f64>() / r;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for &(a, b) in &pairs {
        var_a += (a - mean_a) * (a - mean_a);
        var_b += (b - mean_b) * (b - mean_b);
        cov += (a - mean_a) * (b - mean_b);
    }
    let pos_a: Vec<f64> = pos.iter().map(|&i| scores_a[i]).collect();
    let neg_a: Vec<f64> = neg.iter().map(|&i| scores_a[i]).collect();
    let pos_b: Vec<f64> = pos.iter().map(|&i| scores_b[i]).collect();
    let neg_b: Vec<f64> = neg.iter().map(|&i| scores_b[i]).collect();
    Ok(BootstrapAuc {
        replicates,
        auc_a: rank_auc(&pos_a, &neg_a),
        auc_b: rank_auc(&pos_b, &neg_b),
        var_a: var_a / (r - 1.0),
        var_b: var_b / (r - 1.0),
        cov: cov / (r - 1.0),
    })
}

/// Bootstrap z test of `AUC_a = AUC_b` using the bootstrap standard error
/// of the difference.
pub fn bootstrap_auc_test(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
    replicates: usize,
    seed: u64,
) -> Result<TestResult, StatsError> {
    let b = bootstrap_auc(scores_a, scores_b, labels, replicates, seed)?;
    let var_diff = b.var_diff();
    let (z, p) = if var_diff > 0.0 {
        let z = (b.auc_a - b.auc_b) / var_diff.sqrt();
        (z, two_sided_normal_p(z))
    } else {
        (0.0, 1.0)
    };
    let mut r = TestResult {
        name: "Bootstrap AUC".into(),
        statistic: z,
        df: None,
        p_value: p,
        detail: Default::default(),
        flags: Vec::new(),
    };
    for (k, v) in [
        ("auc_a", b.auc_a),
        ("auc_b", b.auc_b),
        ("var_a", b.var_a),
        ("var_b", b.var_b),
        ("cov", b.cov),
        ("replicates", replicates as f64),
    ] {
        r.detail.insert(k.into(), v);
    }
    Ok(r)
}
