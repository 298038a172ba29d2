use std::fmt;

use indexmap::IndexMap;
use serde::Serialize;

use super::{
    class_stats, cohen_kappa, macro_stats, micro_curves, one_vs_rest, pr_points_weighted,
    roc_points_weighted, BinaryStats, ConfusionMatrix, CurveSeries, MacroStats, MetricError,
};
use crate::aggregation::PatientPrediction;
use crate::data::ClassLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalLevel {
    Image,
    Patient,
    Weighted,
}

impl EvalLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalLevel::Image => "image",
            EvalLevel::Patient => "patient",
            EvalLevel::Weighted => "weighted",
        }
    }
}

impl fmt::Display for EvalLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EvalLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "image" => Ok(EvalLevel::Image),
            "patient" => Ok(EvalLevel::Patient),
            "weighted" => Ok(EvalLevel::Weighted),
            other => Err(format!("unknown level {other:?}")),
        }
    }
}

/// Full metric block for one evaluation. Classes always appear in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub level: EvalLevel,
    pub tie_break: &'static str,
    /// Effective sample size: count of units, or the sum of weights.
    pub n: f64,
    pub confusion_matrix: ConfusionMatrix,
    pub per_class: Vec<BinaryStats>,
    pub overall: MacroStats,
    pub kappa: Option<f64>,
    pub auc_micro: Option<f64>,
    pub ap_micro: Option<f64>,
    pub auc_per_class: IndexMap<&'static str, Option<f64>>,
    pub ap_per_class: IndexMap<&'static str, Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_cost_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patients: Option<Vec<PatientPrediction>>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn accuracy(&self) -> Option<f64> {
        self.overall.accuracy.map(|p| p.value)
    }

    pub fn class(&self, c: ClassLabel) -> &BinaryStats {
        &self.per_class[c.index()]
    }
}

/// Report plus the curves it was computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub roc_micro: Option<CurveSeries>,
    pub pr_micro: Option<CurveSeries>,
    pub roc_per_class: [Option<CurveSeries>; 3],
    pub pr_per_class: [Option<CurveSeries>; 3],
}

/// What [`build_report`] needs. `probs` is absent for hard-label raters.
#[derive(Debug, Clone, Copy)]
pub struct ReportInput<'a> {
    pub level: EvalLevel,
    pub truths: &'a [ClassLabel],
    pub preds: &'a [ClassLabel],
    pub probs: Option<&'a [[f64; 3]]>,
    pub weights: Option<&'a [f64]>,
}

/// Computes every metric of a [`MetricReport`]. Degenerate quantities
/// (undefined ratios, single-class curves, degenerate kappa) come back as
/// `None` with a warning rather than an error.
pub fn build_report(input: ReportInput<'_>) -> Result<Evaluation, MetricError> {
    let n_items = input.truths.len();
    if input.preds.len() != n_items {
        return Err(MetricError::LengthMismatch(n_items, input.preds.len()));
    }
    if let Some(p) = input.probs {
        if p.len() != n_items {
            return Err(MetricError::LengthMismatch(n_items, p.len()));
        }
    }
    let pairs: Vec<_> = input
        .truths
        .iter()
        .copied()
        .zip(input.preds.iter().copied())
        .collect();
    let cm = ConfusionMatrix::from_pairs(&pairs, input.weights)?;
    let per_class = ClassLabel::ALL.map(|c| class_stats(&cm, c));
    let (overall, mut warnings) = macro_stats(&per_class, &cm);

    let kappa = match cohen_kappa(&cm) {
        Ok(k) => Some(k),
        Err(e) => {
            warnings.push(format!("kappa: {e}"));
            None
        }
    };

    let mut roc_micro = None;
    let mut pr_micro = None;
    let mut roc_per_class: [Option<CurveSeries>; 3] = Default::default();
    let mut pr_per_class: [Option<CurveSeries>; 3] = Default::default();
    if let Some(probs) = input.probs {
        match micro_curves(probs, input.truths, input.weights) {
            Ok((roc, pr)) => {
                roc_micro = Some(roc);
                pr_micro = Some(pr);
            }
            Err(e) => warnings.push(format!("micro curves: {e}")),
        }
        for c in ClassLabel::ALL {
            let (scores, labels) = one_vs_rest(probs, input.truths, c);
            match roc_points_weighted(&scores, &labels, input.weights) {
                Ok(r) => roc_per_class[c.index()] = Some(r),
                Err(e) => warnings.push(format!("{c} ROC: {e}")),
            }
            match pr_points_weighted(&scores, &labels, input.weights) {
                Ok(r) => pr_per_class[c.index()] = Some(r),
                Err(e) => warnings.push(format!("{c} PR: {e}")),
            }
        }
    }

    let area = |c: &Option<CurveSeries>| c.as_ref().map(|c| c.area);
    let report = MetricReport {
        level: input.level,
        tie_break: "severity",
        n: cm.total(),
        confusion_matrix: cm,
        per_class: per_class.to_vec(),
        overall,
        kappa,
        auc_micro: area(&roc_micro),
        ap_micro: area(&pr_micro),
        auc_per_class: ClassLabel::ALL
            .iter()
            .map(|c| (c.as_str(), area(&roc_per_class[c.index()])))
            .collect(),
        ap_per_class: ClassLabel::ALL
            .iter()
            .map(|c| (c.as_str(), area(&pr_per_class[c.index()])))
            .collect(),
        time_cost_s: None,
        patients: None,
        warnings,
    };
    Ok(Evaluation {
        report,
        roc_micro,
        pr_micro,
        roc_per_class,
        pr_per_class,
    })
}
