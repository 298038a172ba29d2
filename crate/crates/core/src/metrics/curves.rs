use std::fmt::Write as _;

use serde::Serialize;

use super::MetricError;
use crate::data::ClassLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CurveKind {
    #[serde(rename = "ROC")]
    Roc,
    #[serde(rename = "PR")]
    Pr,
}

impl CurveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveKind::Roc => "ROC",
            CurveKind::Pr => "PR",
        }
    }
}

/// `x` is FPR (ROC) or recall (PR); `y` is TPR (ROC) or precision (PR).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveSeries {
    pub kind: CurveKind,
    pub points: Vec<CurvePoint>,
    pub area: f64,
}

impl CurveSeries {
    /// `x,y,threshold` rows under a `# kind=… area=…` comment line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# kind={} area={}\nx,y,threshold\n", self.kind.as_str(), self.area);
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.x, p.y, p.threshold);
        }
        s
    }
}

/// Distinct thresholds in descending order with the positive and negative
/// weight sitting exactly at each one.
fn tie_groups(
    scores: &[f64],
    labels: &[bool],
    weights: Option<&[f64]>,
) -> Result<Vec<(f64, f64, f64)>, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(w) = weights {
        if w.len() != scores.len() {
            return Err(MetricError::LengthMismatch(scores.len(), w.len()));
        }
        if let Some(&bad) = w.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(MetricError::BadWeight(bad));
        }
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for i in order {
        let w = weights.map_or(1.0, |w| w[i]);
        let (pos, neg) = if labels[i] { (w, 0.0) } else { (0.0, w) };
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += pos;
                g.2 += neg;
            }
            _ => groups.push((scores[i], pos, neg)),
        }
    }
    Ok(groups)
}

pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<CurveSeries, MetricError> {
    roc_points_weighted(scores, labels, None)
}

/// ROC curve (TPR against FPR) over distinct thresholds, ties grouped.
/// The trapezoidal area equals the Mann-Whitney statistic with half credit
/// for tied pairs.
pub fn roc_points_weighted(
    scores: &[f64],
    labels: &[bool],
    weights: Option<&[f64]>,
) -> Result<CurveSeries, MetricError> {
    let groups = tie_groups(scores, labels, weights)?;
    let p_total: f64 = groups.iter().map(|g| g.1).sum();
    let n_total: f64 = groups.iter().map(|g| g.2).sum();
    if p_total <= 0.0 || n_total <= 0.0 {
        return Err(MetricError::SingleClass);
    }
    let mut points = Vec::with_capacity(groups.len() + 1);
    points.push(CurvePoint {
        x: 0.0,
        y: 0.0,
        threshold: f64::INFINITY,
    });
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut doubled_area = 0.0;
    for &(thr, pos, neg) in &groups {
        doubled_area += neg * (2.0 * tp + pos);
        tp += pos;
        fp += neg;
        points.push(CurvePoint {
            x: fp / n_total,
            y: tp / p_total,
            threshold: thr,
        });
    }
    let area = (doubled_area / (2.0 * p_total * n_total)).clamp(0.0, 1.0);
    Ok(CurveSeries {
        kind: CurveKind::Roc,
        points,
        area,
    })
}

pub fn pr_points(scores: &[f64], labels: &[bool]) -> Result<CurveSeries, MetricError> {
    pr_points_weighted(scores, labels, None)
}

/// Precision-recall curve with non-interpolated average precision
/// `Σ precision(k)·Δrecall(k)` over tie groups. The first point is the
/// conventional (recall 0, precision 1) anchor.
pub fn pr_points_weighted(
    scores: &[f64],
    labels: &[bool],
    weights: Option<&[f64]>,
) -> Result<CurveSeries, MetricError> {
    let groups = tie_groups(scores, labels, weights)?;
    let p_total: f64 = groups.iter().map(|g| g.1).sum();
    if p_total <= 0.0 {
        return Err(MetricError::NoPositives);
    }
    let mut points = Vec::with_capacity(groups.len() + 1);
    points.push(CurvePoint {
        x: 0.0,
        y: 1.0,
        threshold: f64::INFINITY,
    });
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut ap = 0.0;
    for &(thr, pos, neg) in &groups {
        tp += pos;
        fp += neg;
        let precision = tp / (tp + fp);
        ap += precision * pos;
        points.push(CurvePoint {
            x: tp / p_total,
            y: precision,
            threshold: thr,
        });
    }
    Ok(CurveSeries {
        kind: CurveKind::Pr,
        points,
        area: (ap / p_total).clamp(0.0, 1.0),
    })
}

/// Scores and indicators for `class` against the rest.
pub fn one_vs_rest(
    probs: &[[f64; 3]],
    truths: &[ClassLabel],
    class: ClassLabel,
) -> (Vec<f64>, Vec<bool>) {
    let k = class.index();
    (
        probs.iter().map(|p| p[k]).collect(),
        truths.iter().map(|&t| t == class).collect(),
    )
}

/// Micro-averaged ROC and PR curves: every (image, class) pair becomes one
/// binary observation with score `probs[i][k]` and label `truth_i == k`.
pub fn micro_curves(
    probs: &[[f64; 3]],
    truths: &[ClassLabel],
    weights: Option<&[f64]>,
) -> Result<(CurveSeries, CurveSeries), MetricError> {
    if probs.len() != truths.len() {
        return Err(MetricError::LengthMismatch(probs.len(), truths.len()));
    }
    if probs.is_empty() {
        return Err(MetricError::Empty);
    }
    if truths.iter().all(|&t| t == truths[0]) {
        return Err(MetricError::OneClassPresent);
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(3 * n);
    let mut labels = Vec::with_capacity(3 * n);
    let mut flat_w = weights.map(|_| Vec::with_capacity(3 * n));
    for i in 0..n {
        for k in ClassLabel::ALL {
            scores.push(probs[i][k.index()]);
            labels.push(truths[i] == k);
            if let (Some(fw), Some(w)) = (flat_w.as_mut(), weights) {
                fw.push(w[i]);
            }
        }
    }
    let fw = flat_w.as_deref();
    Ok((
        roc_points_weighted(&scores, &labels, fw)?,
        pr_points_weighted(&scores, &labels, fw)?,
    ))
}
