#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use serde::Serialize;

use super::special::{chi2_sf, two_sided_normal_p};
use super::StatsError;
use crate::data::ClassLabel;
use crate::metrics::{cohen_kappa, ConfusionMatrix};

/// Outcome of one hypothesis test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub name: String,
    pub statistic: f64,
    /// Present for chi-square based tests only.
    pub df: Option<u32>,
    #[serde(rename = "p")]
    pub p_value: f64,
    pub detail: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl TestResult {
    fn new(name: &str, statistic: f64, df: Option<u32>, p_value: f64) -> Self {
        Self {
            name: name.to_string(),
            statistic,
            df,
            p_value: p_value.clamp(0.0, 1.0),
            detail: BTreeMap::new(),
            flags: Vec::new(),
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.detail.insert(key.to_string(), value);
        self
    }

    pub fn is_degenerate(&self) -> bool {
        self.flags.iter().any(|f| f.starts_with("degenerate"))
    }
}

/// Two raters' labels over the same items, plus ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedPredictions {
    truths: Vec<ClassLabel>,
    preds_a: Vec<ClassLabel>,
    preds_b: Vec<ClassLabel>,
}

impl PairedPredictions {
    pub fn new(
        truths: Vec<ClassLabel>,
        preds_a: Vec<ClassLabel>,
        preds_b: Vec<ClassLabel>,
    ) -> Result<Self, StatsError> {
        if preds_a.len() != truths.len() {
            return Err(StatsError::LengthMismatch(truths.len(), preds_a.len()));
        }
        if preds_b.len() != truths.len() {
            return Err(StatsError::LengthMismatch(truths.len(), preds_b.len()));
        }
        Ok(Self {
            truths,
            preds_a,
            preds_b,
        })
    }

    pub fn truths(&self) -> &[ClassLabel] {
        &self.truths
    }

    pub fn preds_a(&self) -> &[ClassLabel] {
        &self.preds_a
    }

    pub fn preds_b(&self) -> &[ClassLabel] {
        &self.preds_b
    }

    pub fn len(&self) -> usize {
        self.truths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truths.is_empty()
    }

    /// Cross-table `T[a][b]` of (pred_a, pred_b).
    pub fn cross_table(&self) -> [[f64; 3]; 3] {
        cross_table(&self.preds_a, &self.preds_b)
    }

    pub fn swapped(&self) -> Self {
        Self {
            truths: self.truths.clone(),
            preds_a: self.preds_b.clone(),
            preds_b: self.preds_a.clone(),
        }
    }
}

pub(crate) fn cross_table(a: &[ClassLabel], b: &[ClassLabel]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for (x, y) in a.iter().zip(b) {
        t[x.index()][y.index()] += 1.0;
    }
    t
}

/// How off-diagonal pairs with `T_ij + T_ji = 0` enter the Bowker test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BowkerDf {
    /// Dropped from both the statistic and the degrees of freedom.
    #[default]
    DropEmpty,
    /// Always K(K−1)/2 degrees of freedom; empty pairs contribute zero.
    Full,
}

pub fn bowker_test(pp: &PairedPredictions) -> TestResult {
    bowker_from_table(&pp.cross_table(), BowkerDf::DropEmpty)
}

/// McNemar-Bowker symmetry test on a 3×3 paired cross-table, no continuity
/// correction.
pub fn bowker_from_table(t: &[[f64; 3]; 3], mode: BowkerDf) -> TestResult {
    let mut statistic = 0.0;
    let mut included = 0u32;
    for i in 0..3 {
        for j in (i + 1)..3 {
            let s = t[i][j] + t[j][i];
            if s > 0.0 {
                let d = t[i][j] - t[j][i];
                statistic += d * d / s;
                included += 1;
            }
        }
    }
    let df = match mode {
        BowkerDf::DropEmpty => included,
        BowkerDf::Full => 3,
    };
    let n: f64 = t.iter().flatten().sum();
    let mut r = if included == 0 {
        let mut r = TestResult::new("McNemar-Bowker", 0.0, Some(df), 1.0);
        r.flags.push("degenerate: no discordant pairs".into());
        r
    } else {
        TestResult::new("McNemar-Bowker", statistic, Some(df), chi2_sf(statistic, df))
    };
    r = r.with("n", n).with("pairs_included", included as f64);
    r
}

/// 1-based ranks with ties sharing the mean of their rank range.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1
        let mean = (i + j + 2) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// AUCs of two correlated score vectors with their DeLong covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeLongCov {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub cov: f64,
}

impl DeLongCov {
    pub fn var_diff(&self) -> f64 {
        self.var_a + self.var_b - 2.0 * self.cov
    }
}

/// Structural components (V10 per positive, V01 per negative) of one
/// score vector via midranks.
fn structural_components(scores: &[f64], pos: &[usize], neg: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let m = pos.len();
    let n = neg.len();
    let xs: Vec<f64> = pos.iter().map(|&i| scores[i]).collect();
    let ys: Vec<f64> = neg.iter().map(|&i| scores[i]).collect();
    let tx = midranks(&xs);
    let ty = midranks(&ys);
    let mut zs = xs.clone();
    zs.extend_from_slice(&ys);
    let tz = midranks(&zs);
    let v10 = (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect();
    let v01 = (0..n).map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64).collect();
    (v10, v01)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (a.len() as f64 - 1.0)
}

pub(crate) fn split_labels(labels: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let pos = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg = (0..labels.len()).filter(|&i| !labels[i]).collect();
    (pos, neg)
}

pub(crate) fn check_binary_inputs(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
) -> Result<(Vec<usize>, Vec<usize>), StatsError> {
    if scores_a.len() != labels.len() {
        return Err(StatsError::LengthMismatch(labels.len(), scores_a.len()));
    }
    if scores_b.len() != labels.len() {
        return Err(StatsError::LengthMismatch(labels.len(), scores_b.len()));
    }
    if scores_a.iter().chain(scores_b).any(|s| !s.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (pos, neg) = split_labels(labels);
    if pos.len() < 2 || neg.len() < 2 {
        return Err(StatsError::TooFewPerClass {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    Ok((pos, neg))
}

/// DeLong's nonparametric covariance of two correlated AUCs (midrank form).
pub fn delong_auc_cov(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
) -> Result<DeLongCov, StatsError> {
    let (pos, neg) = check_binary_inputs(scores_a, scores_b, labels)?;
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let (v10a, v01a) = structural_components(scores_a, &pos, &neg);
    let (v10b, v01b) = structural_components(scores_b, &pos, &neg);
    let s10 = [
        sample_cov(&v10a, &v10a),
        sample_cov(&v10b, &v10b),
        sample_cov(&v10a, &v10b),
    ];
    let s01 = [
        sample_cov(&v01a, &v01a),
        sample_cov(&v01b, &v01b),
        sample_cov(&v01a, &v01b),
    ];
    Ok(DeLongCov {
        auc_a: mean(&v10a),
        auc_b: mean(&v10b),
        var_a: s10[0] / m + s01[0] / n,
        var_b: s10[1] / m + s01[1] / n,
        cov: s10[2] / m + s01[2] / n,
    })
}

/// Below this the variance of the AUC difference is treated as zero.
pub const DELONG_DEGENERATE_VAR: f64 = 1e-15;

/// Two-sided DeLong test of `AUC_a = AUC_b`.
pub fn delong_test(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
) -> Result<TestResult, StatsError> {
    let c = delong_auc_cov(scores_a, scores_b, labels)?;
    let var_diff = c.var_diff();
    let mut r = if var_diff < DELONG_DEGENERATE_VAR {
        let mut r = TestResult::new("DeLong", 0.0, None, 1.0);
        r.flags.push("degenerate: variance of AUC difference is zero".into());
        r
    } else {
        let z = (c.auc_a - c.auc_b) / var_diff.sqrt();
        TestResult::new("DeLong", z, None, two_sided_normal_p(z))
    };
    r = r
        .with("auc_a", c.auc_a)
        .with("auc_b", c.auc_b)
        .with("var_a", c.var_a)
        .with("var_b", c.var_b)
        .with("cov", c.cov)
        .with("var_diff", var_diff);
    Ok(r)
}

/// DeLong on one-vs-rest scores for `class`.
pub fn delong_test_class(
    probs_a: &[[f64; 3]],
    probs_b: &[[f64; 3]],
    truths: &[ClassLabel],
    class: ClassLabel,
) -> Result<TestResult, StatsError> {
    let k = class.index();
    let a: Vec<f64> = probs_a.iter().map(|p| p[k]).collect();
    let b: Vec<f64> = probs_b.iter().map(|p| p[k]).collect();
    let labels: Vec<bool> = truths.iter().map(|&t| t == class).collect();
    let mut r = delong_test(&a, &b, &labels)?;
    r.name = format!("DeLong ({class})");
    Ok(r)
}

/// DeLong on micro-flattened scores. The flattened pairs are not
/// independent, so the variance is only approximate.
pub fn delong_test_micro(
    probs_a: &[[f64; 3]],
    probs_b: &[[f64; 3]],
    truths: &[ClassLabel],
) -> Result<TestResult, StatsError> {
    let flat = |p: &[[f64; 3]]| p.iter().flatten().copied().collect::<Vec<f64>>();
    let labels: Vec<bool> = truths
        .iter()
        .flat_map(|t| ClassLabel::ALL.map(|k| k == *t))
        .collect();
    let mut r = delong_test(&flat(probs_a), &flat(probs_b), &labels)?;
    r.name = "DeLong (micro)".into();
    r.flags.push("experimental: flattened pairs are correlated".into());
    Ok(r)
}

/// Cohen's kappa between two label sequences with a large-sample z test
/// under the null κ = 0.
pub fn kappa_test(labels_a: &[ClassLabel], labels_b: &[ClassLabel]) -> Result<TestResult, StatsError> {
    if labels_a.len() != labels_b.len() {
        return Err(StatsError::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.is_empty() {
        return Err(StatsError::Empty);
    }
    let t = cross_table(labels_a, labels_b);
    let n = labels_a.len() as f64;
    let p = t.map(|row| row.map(|v| v / n));
    let rows: [f64; 3] = std::array::from_fn(|i| p[i].iter().sum());
    let cols: [f64; 3] = std::array::from_fn(|j| p.iter().map(|r| r[j]).sum());
    let p_o: f64 = (0..3).map(|k| p[k][k]).sum();
    let p_e: f64 = (0..3).map(|k| rows[k] * cols[k]).sum();

    let kappa = match cohen_kappa(&ConfusionMatrix::from_counts(t)) {
        Ok(k) => k,
        Err(_) => return Err(StatsError::Degenerate("chance agreement is 1 but raters differ".into())),
    };

    if (1.0 - p_e).abs() < 1e-15 {
        let mut r = TestResult::new("Kappa", 0.0, None, 1.0)
            .with("kappa", kappa)
            .with("n", n)
            .with("p_o", p_o)
            .with("p_e", p_e);
        r.flags.push("degenerate: a single category observed by both raters".into());
        return Ok(r);
    }

    let null_num = p_e + p_e * p_e - (0..3).map(|k| rows[k] * cols[k] * (rows[k] + cols[k])).sum::<f64>();
    let se0 = null_num.max(0.0).sqrt() / ((1.0 - p_e) * n.sqrt());

    // Fleiss, Cohen & Everitt non-null variance, for the interval.
    let a: f64 = (0..3)
        .map(|i| {
            let f = 1.0 - (rows[i] + cols[i]) * (1.0 - kappa);
            p[i][i] * f * f
        })
        .sum();
    let mut b = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let s = cols[i] + rows[j];
                b += p[i][j] * s * s;
            }
        }
    }
    b *= (1.0 - kappa) * (1.0 - kappa);
    let c = kappa - p_e * (1.0 - kappa);
    let var = (a + b - c * c).max(0.0) / (n * (1.0 - p_e) * (1.0 - p_e));
    let se = var.sqrt();

    let mut r = if se0 <= 1e-15 {
        let mut r = TestResult::new("Kappa", 0.0, None, 1.0);
        r.flags.push("degenerate: null standard error is zero".into());
        r
    } else {
        let z = kappa / se0;
        TestResult::new("Kappa", z, None, two_sided_normal_p(z)).with("z", z)
    };
    r = r
        .with("kappa", kappa)
        .with("se0", se0)
        .with("se", se)
        .with("ci_low", kappa - crate::metrics::Z_95 * se)
        .with("ci_high", kappa + crate::metrics::Z_95 * se)
        .with("n", n)
        .with("p_o", p_o)
        .with("p_e", p_e);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::{Aegja as A, Control as C, Eegja as E};

    fn table_pairs(t: [[usize; 3]; 3]) -> PairedPredictions {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for _ in 0..t[i][j] {
                    a.push(ClassLabel::ALL[i]);
                    b.push(ClassLabel::ALL[j]);
                }
            }
        }
        let truths = a.clone();
        PairedPredictions::new(truths, a, b).unwrap()
    }

    #[test]
    fn bowker_symmetric_is_null() {
        let r = bowker_test(&table_pairs([[5, 2, 1], [2, 4, 3], [1, 3, 6]]));
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.df, Some(3));
    }

    #[test]
    fn bowker_single_discordant_pair() {
        let r = bowker_test(&table_pairs([[3, 4, 0], [0, 2, 0], [0, 0, 1]]));
        assert_eq!(r.statistic, 4.0);
        assert_eq!(r.df, Some(1));
        assert!((r.p_value - 0.045_500_263_896_358_41).abs() < 1e-10);
    }

    #[test]
    fn bowker_three_pairs() {
        // (T_ij, T_ji) = (5,1), (2,2), (3,3)
        let r = bowker_test(&table_pairs([[0, 5, 2], [1, 0, 3], [2, 3, 0]]));
        assert!((r.statistic - 16.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.df, Some(3));
        assert!((r.p_value - 0.445_921_698_363_122_8).abs() < 1e-10);
    }

    #[test]
    fn bowker_diagonal_and_full_mode() {
        let diag = bowker_test(&table_pairs([[3, 0, 0], [0, 3, 0], [0, 0, 3]]));
        assert_eq!((diag.statistic, diag.p_value, diag.df), (0.0, 1.0, Some(0)));
        let t = [[3.0, 4.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
        let full = bowker_from_table(&t, BowkerDf::Full);
        assert_eq!(full.df, Some(3));
        assert!((full.p_value - chi2_sf(4.0, 3)).abs() < 1e-15);
    }

    #[test]
    fn midrank_examples() {
        assert_eq!(midranks(&[10.0, 20.0, 30.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(midranks(&[5.0, 5.0]), vec![1.5, 1.5]);
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn delong_identical_scores() {
        let s = [0.9, 0.3, 0.7, 0.2, 0.6, 0.4];
        let l = [true, false, true, false, true, false];
        let c = delong_auc_cov(&s, &s, &l).unwrap();
        assert_eq!(c.var_a, c.var_b);
        assert_eq!(c.cov, c.var_a);
        let r = delong_test(&s, &s, &l).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(r.is_degenerate());
    }

    #[test]
    fn delong_separable_has_zero_variance() {
        let s = [0.9, 0.8, 0.7, 0.2, 0.1];
        let l = [true, true, true, false, false];
        let c = delong_auc_cov(&s, &s, &l).unwrap();
        assert_eq!(c.auc_a, 1.0);
        assert_eq!(c.var_a, 0.0);
    }

    #[test]
    fn delong_swap_negates_z() {
        let a = [0.9, 0.4, 0.8, 0.3, 0.5, 0.45, 0.2];
        let b = [0.6, 0.5, 0.7, 0.55, 0.3, 0.65, 0.1];
        let l = [true, false, true, false, true, false, false];
        let ab = delong_test(&a, &b, &l).unwrap();
        let ba = delong_test(&b, &a, &l).unwrap();
        assert!((ab.statistic + ba.statistic).abs() < 1e-14);
        assert!((ab.p_value - ba.p_value).abs() < 1e-14);
    }

    #[test]
    fn delong_needs_two_per_class() {
        let e = delong_auc_cov(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], &[true, false, false]);
        assert!(matches!(e, Err(StatsError::TooFewPerClass { positives: 1, .. })));
    }

    #[test]
    fn kappa_test_cases() {
        let x = [A, E, C, A, E, C, C];
        let r = kappa_test(&x, &x).unwrap();
        assert_eq!(r.detail["kappa"], 1.0);
        assert!(r.p_value < 0.05);

        let t = table_pairs([[2, 1, 0], [0, 2, 1], [1, 0, 2]]);
        let r = kappa_test(t.preds_a(), t.preds_b()).unwrap();
        assert!((r.detail["kappa"] - 0.5).abs() < 1e-12);

        let constant = [C, C, C];
        let r = kappa_test(&constant, &constant).unwrap();
        assert_eq!(r.detail["kappa"], 1.0);
        assert!(r.is_degenerate());
    }

    #[test]
    fn kappa_null_se_matches_hand_value() {
        // T = [[2,1,0],[0,2,1],[1,0,2]]: margins all 1/3, p_e = 1/3,
        // Σ r c (r + c) = 3 · (1/9)(2/3) = 2/9, se0 = sqrt(1/3 + 1/9 − 2/9)/((2/3)·3)
        let t = table_pairs([[2, 1, 0], [0, 2, 1], [1, 0, 2]]);
        let r = kappa_test(t.preds_a(), t.preds_b()).unwrap();
        let expected = (2.0f64 / 9.0).sqrt() / 2.0;
        assert!((r.detail["se0"] - expected).abs() < 1e-12);
    }
}
