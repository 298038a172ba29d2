//! Confusion matrices, one-vs-rest statistics with Wald intervals, macro
//! averaging, Cohen's kappa, and ROC/PR curves.

mod curves;
mod report;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::data::ClassLabel;

pub use curves::{
    micro_curves, one_vs_rest, pr_points, pr_points_weighted, roc_points, roc_points_weighted,
    CurveKind, CurvePoint, CurveSeries,
};
pub use report::{build_report, EvalLevel, Evaluation, MetricReport, ReportInput};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("weights must be positive and finite, got {0}")]
    BadWeight(f64),
    #[error("confusion matrix total is zero")]
    ZeroTotal,
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("curve needs at least one positive and one negative label")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("all truths belong to one class")]
    OneClassPresent,
    #[error("kappa undefined: chance agreement is 1 but observed agreement is {0}")]
    DegenerateKappa(f64),
}

/// 3×3 table of (possibly fractional) counts; rows are truth, columns prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: [[f64; 3]; 3],
}

impl Serialize for ConfusionMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.counts.serialize(s)
    }
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[f64; 3]; 3]) -> Self {
        Self { counts }
    }

    /// `cm[t][p] = Σ weight` over pairs with truth `t` and prediction `p`.
    pub fn from_pairs(
        pairs: &[(ClassLabel, ClassLabel)],
        weights: Option<&[f64]>,
    ) -> Result<Self, MetricError> {
        if pairs.is_empty() {
            return Err(MetricError::Empty);
        }
        if let Some(w) = weights {
            if w.len() != pairs.len() {
                return Err(MetricError::LengthMismatch(pairs.len(), w.len()));
            }
            if let Some(&bad) = w.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
                return Err(MetricError::BadWeight(bad));
            }
        }
        // compensated sums, so that k weights of 1/k add back to a whole count
        let mut sum = [[0.0; 3]; 3];
        let mut comp = [[0.0; 3]; 3];
        for (i, (t, p)) in pairs.iter().enumerate() {
            let (s, c) = (&mut sum[t.index()][p.index()], &mut comp[t.index()][p.index()]);
            let x = weights.map_or(1.0, |w| w[i]);
            let next = *s + x;
            *c += if s.abs() >= x.abs() { (*s - next) + x } else { (x - next) + *s };
            *s = next;
        }
        let mut counts = [[0.0; 3]; 3];
        for t in 0..3 {
            for p in 0..3 {
                counts[t][p] = sum[t][p] + comp[t][p];
            }
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> f64 {
        (0..3).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> f64 {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> f64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    pub fn get(&self, truth: ClassLabel, pred: ClassLabel) -> f64 {
        self.counts[truth.index()][pred.index()]
    }

    /// Collapses to `(tp, fp, fn, tn)` for `class` against the rest.
    pub fn one_vs_rest(&self, class: ClassLabel) -> (f64, f64, f64, f64) {
        let k = class.index();
        let tp = self.counts[k][k];
        let fn_ = self.row_sum(k) - tp;
        let fp = self.col_sum(k) - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp, fp, fn_, tn)
    }
}

/// Unclipped Wald bounds `p ± 1.96·sqrt(p(1−p)/n)`.
pub fn wald_bounds(p: f64, n: f64) -> (f64, f64) {
    let half = Z_95 * (p * (1.0 - p) / n).sqrt();
    (p - half, p + half)
}

/// Wald 95% interval clipped to [0, 1].
pub fn wald_ci(p: f64, n: f64) -> (f64, f64) {
    let (lo, hi) = wald_bounds(p, n);
    (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0))
}

/// A proportion with its 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Proportion {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Denominator used for the interval; `None` for macro averages.
    pub n: Option<f64>,
    /// Interval bounds before clipping. Macro averages are built from these.
    #[serde(skip)]
    pub wald_low: f64,
    #[serde(skip)]
    pub wald_high: f64,
}

impl Proportion {
    /// `successes / n` with its Wald interval; `None` when `n` is zero.
    pub fn from_ratio(successes: f64, n: f64) -> Option<Self> {
        if n <= 0.0 {
            return None;
        }
        let value = (successes / n).clamp(0.0, 1.0);
        let (wald_low, wald_high) = wald_bounds(value, n);
        Some(Self {
            value,
            ci_low: wald_low.clamp(0.0, 1.0),
            ci_high: wald_high.clamp(0.0, 1.0),
            n: Some(n),
            wald_low,
            wald_high,
        })
    }

    /// Mean of point estimates and of unclipped bounds; the averaged bounds
    /// are clipped afterwards.
    fn mean_of(parts: &[Proportion]) -> Option<Self> {
        if parts.is_empty() {
            return None;
        }
        let m = parts.len() as f64;
        let value = parts.iter().map(|p| p.value).sum::<f64>() / m;
        let wald_low = parts.iter().map(|p| p.wald_low).sum::<f64>() / m;
        let wald_high = parts.iter().map(|p| p.wald_high).sum::<f64>() / m;
        Some(Self {
            value,
            ci_low: wald_low.clamp(0.0, 1.0),
            ci_high: wald_high.clamp(0.0, 1.0),
            n: None,
            wald_low,
            wald_high,
        })
    }
}

/// One-vs-rest statistics for one class. Undefined ratios are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinaryStats {
    pub class: ClassLabel,
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub tn: f64,
    pub accuracy: Option<Proportion>,
    pub sensitivity: Option<Proportion>,
    pub specificity: Option<Proportion>,
    pub ppv: Option<Proportion>,
    pub npv: Option<Proportion>,
}

impl BinaryStats {
    /// The four macro-averaged metrics, in report order.
    pub fn rates(&self) -> [(&'static str, Option<Proportion>); 4] {
        [
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("ppv", self.ppv),
            ("npv", self.npv),
        ]
    }
}

pub fn class_stats(cm: &ConfusionMatrix, class: ClassLabel) -> BinaryStats {
    let (tp, fp, fn_, tn) = cm.one_vs_rest(class);
    BinaryStats {
        class,
        tp,
        fp,
        fn_,
        tn,
        accuracy: Proportion::from_ratio(tp + tn, cm.total()),
        sensitivity: Proportion::from_ratio(tp, tp + fn_),
        specificity: Proportion::from_ratio(tn, tn + fp),
        ppv: Proportion::from_ratio(tp, tp + fp),
        npv: Proportion::from_ratio(tn, tn + fn_),
    }
}

/// Overall block: macro means of the per-class rates plus overall accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroStats {
    pub accuracy: Option<Proportion>,
    pub sensitivity: Option<Proportion>,
    pub specificity: Option<Proportion>,
    pub ppv: Option<Proportion>,
    pub npv: Option<Proportion>,
}

/// Averages per-class rates across categories. Undefined per-class values are
/// left out of the mean and reported in the returned warnings.
pub fn macro_stats(per_class: &[BinaryStats; 3], cm: &ConfusionMatrix) -> (MacroStats, Vec<String>) {
    let mut warnings = Vec::new();
    let mut averaged = [None; 4];
    for (slot, out) in averaged.iter_mut().enumerate() {
        let mut defined = Vec::with_capacity(3);
        for s in per_class {
            let (name, value) = s.rates()[slot];
            match value {
                Some(p) => defined.push(p),
                None => warnings.push(format!(
                    "{name} undefined for {} (zero denominator); excluded from the macro mean",
                    s.class
                )),
            }
        }
        *out = Proportion::mean_of(&defined);
    }
    let [sensitivity, specificity, ppv, npv] = averaged;
    let stats = MacroStats {
        accuracy: Proportion::from_ratio(cm.trace(), cm.total()),
        sensitivity,
        specificity,
        ppv,
        npv,
    };
    (stats, warnings)
}

/// Cohen's kappa from a cross-table.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64, MetricError> {
    let total = cm.total();
    if total <= 0.0 {
        return Err(MetricError::ZeroTotal);
    }
    let p_o = cm.trace() / total;
    let p_e = (0..3).map(|k| cm.row_sum(k) * cm.col_sum(k)).sum::<f64>() / (total * total);
    if (1.0 - p_e).abs() < 1e-15 {
        return if (1.0 - p_o).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(MetricError::DegenerateKappa(p_o))
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}
