//! Patient-level aggregation, inverse-count weighting, reader pooling and
//! subgroup filters.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::Serialize;
use thiserror::Error;

use crate::data::{argmax_severity, Arm, ClassLabel, DataError, Dataset, ReaderGroup, ReaderRecord};
use crate::metrics::{
    build_report, cohen_kappa, ConfusionMatrix, EvalLevel, Evaluation, MetricError, ReportInput,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("reader {reader_id:?} answered image {image_id:?} which has no model prediction")]
    DanglingImage { reader_id: String, image_id: String },
    #[error("no reader responses for group {group}, arm {arm}")]
    NoResponses { group: ReaderGroup, arm: Arm },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub truth: ClassLabel,
    pub mean_probs: [f64; 3],
    pub pred: ClassLabel,
    pub image_count: usize,
}

/// Member probability vectors in a canonical order, so sums do not depend
/// on the order images appear in the file.
fn sorted_member_probs(ds: &Dataset, members: &[usize]) -> Vec<[f64; 3]> {
    let mut v: Vec<[f64; 3]> = members.iter().map(|&i| ds.records()[i].probs).collect();
    v.sort_by(|a, b| {
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    v
}

fn patient_prediction(ds: &Dataset, pid: &str, members: &[usize], probs: [f64; 3]) -> PatientPrediction {
    PatientPrediction {
        patient_id: pid.to_string(),
        truth: ds.records()[members[0]].truth,
        mean_probs: probs,
        pred: argmax_severity(&probs),
        image_count: members.len(),
    }
}

/// Mean of each patient's image probability vectors, patients in first-appearance order.
pub fn patient_mean_aggregate(ds: &Dataset) -> Vec<PatientPrediction> {
    ds.patient_index()
        .iter()
        .map(|(pid, members)| {
            let n = members.len() as f64;
            let mut sum = [0.0; 3];
            for p in sorted_member_probs(ds, members) {
                for k in 0..3 {
                    sum[k] += p[k];
                }
            }
            patient_prediction(ds, pid, members, sum.map(|s| s / n))
        })
        .collect()
}

/// Element-wise max over a patient's images, renormalized to sum to 1.
pub fn patient_max_aggregate(ds: &Dataset) -> Vec<PatientPrediction> {
    ds.patient_index()
        .iter()
        .map(|(pid, members)| {
            let mut mx = [0.0f64; 3];
            for &i in members {
                let p = ds.records()[i].probs;
                for k in 0..3 {
                    mx[k] = mx[k].max(p[k]);
                }
            }
            let s: f64 = mx.iter().sum();
            patient_prediction(ds, pid, members, mx.map(|v| v / s))
        })
        .collect()
}

/// `1 / (images of the patient)` for every record, in record order.
pub fn inverse_count_weights(ds: &Dataset) -> Vec<f64> {
    let mut w = vec![0.0; ds.len()];
    for members in ds.patient_index().values() {
        let share = 1.0 / members.len() as f64;
        for &i in members {
            w[i] = share;
        }
    }
    w
}

/// Computes the metric report at the requested level.
pub fn evaluate(ds: &Dataset, level: EvalLevel) -> Result<Evaluation, AggregationError> {
    if ds.is_empty() {
        return Err(DataError::Empty.into());
    }
    match level {
        EvalLevel::Image | EvalLevel::Weighted => {
            let truths: Vec<_> = ds.records().iter().map(|r| r.truth).collect();
            let preds: Vec<_> = ds.records().iter().map(|r| r.predicted()).collect();
            let probs: Vec<_> = ds.records().iter().map(|r| r.probs).collect();
            let weights = (level == EvalLevel::Weighted).then(|| inverse_count_weights(ds));
            Ok(build_report(ReportInput {
                level,
                truths: &truths,
                preds: &preds,
                probs: Some(&probs),
                weights: weights.as_deref(),
            })?)
        }
        EvalLevel::Patient => {
            let patients = patient_mean_aggregate(ds);
            let truths: Vec<_> = patients.iter().map(|p| p.truth).collect();
            let preds: Vec<_> = patients.iter().map(|p| p.pred).collect();
            let probs: Vec<_> = patients.iter().map(|p| p.mean_probs).collect();
            let mut ev = build_report(ReportInput {
                level,
                truths: &truths,
                preds: &preds,
                probs: Some(&probs),
                weights: None,
            })?;
            ev.report.patients = Some(patients);
            Ok(ev)
        }
    }
}

/// One reader observation joined to the model's answer on the same image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledObservation {
    pub reader_id: String,
    pub image_id: String,
    pub truth: ClassLabel,
    pub reader_pred: ClassLabel,
    pub model_pred: ClassLabel,
    pub elapsed_s: Option<f64>,
}

/// All observations of one (group, arm), pooled over its readers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledReaderPairs {
    pub group: ReaderGroup,
    pub arm: Arm,
    pub observations: Vec<PooledObservation>,
    pub reader_count: usize,
    /// Mean over observations; `None` when any observation lacks a time.
    pub mean_elapsed_s: Option<f64>,
}

impl PooledReaderPairs {
    pub fn truths(&self) -> Vec<ClassLabel> {
        self.observations.iter().map(|o| o.truth).collect()
    }

    pub fn reader_preds(&self) -> Vec<ClassLabel> {
        self.observations.iter().map(|o| o.reader_pred).collect()
    }

    pub fn model_preds(&self) -> Vec<ClassLabel> {
        self.observations.iter().map(|o| o.model_pred).collect()
    }

    /// Reader ids in first-appearance order.
    pub fn reader_ids(&self) -> Vec<&str> {
        let mut seen: IndexMap<&str, ()> = IndexMap::new();
        for o in &self.observations {
            seen.insert(o.reader_id.as_str(), ());
        }
        seen.into_keys().collect()
    }

    /// Metrics of the pooled reader answers. Hard labels only, so no curves.
    pub fn evaluate(&self) -> Result<Evaluation, AggregationError> {
        let mut ev = build_report(ReportInput {
            level: EvalLevel::Image,
            truths: &self.truths(),
            preds: &self.reader_preds(),
            probs: None,
            weights: None,
        })?;
        ev.report.time_cost_s = self.mean_elapsed_s;
        Ok(ev)
    }

    /// Per-image counts of the group's answers.
    fn answer_counts(&self) -> IndexMap<&str, [f64; 3]> {
        let mut m: IndexMap<&str, [f64; 3]> = IndexMap::new();
        for o in &self.observations {
            m.entry(o.image_id.as_str()).or_default()[o.reader_pred.index()] += 1.0;
        }
        m
    }
}

/// Joins the responses of one (group, arm) to the model predictions.
pub fn pool_readers(
    readers: &[ReaderRecord],
    model: &Dataset,
    group: ReaderGroup,
    arm: Arm,
) -> Result<PooledReaderPairs, AggregationError> {
    let lookup = model.image_lookup();
    let mut observations = Vec::new();
    let mut ids: HashMap<&str, ()> = HashMap::new();
    for r in readers.iter().filter(|r| r.group == group && r.arm == arm) {
        let m = lookup
            .get(r.image_id.as_str())
            .ok_or_else(|| AggregationError::DanglingImage {
                reader_id: r.reader_id.clone(),
                image_id: r.image_id.clone(),
            })?;
        ids.insert(r.reader_id.as_str(), ());
        observations.push(PooledObservation {
            reader_id: r.reader_id.clone(),
            image_id: r.image_id.clone(),
            truth: m.truth,
            reader_pred: r.pred,
            model_pred: m.predicted(),
            elapsed_s: r.elapsed_s,
        });
    }
    if observations.is_empty() {
        return Err(AggregationError::NoResponses { group, arm });
    }
    let times: Option<Vec<f64>> = observations.iter().map(|o| o.elapsed_s).collect();
    let mean_elapsed_s = times.map(|t| t.iter().sum::<f64>() / t.len() as f64);
    Ok(PooledReaderPairs {
        group,
        arm,
        reader_count: ids.len(),
        observations,
        mean_elapsed_s,
    })
}

/// Agreement table between two pooled groups: on each shared image, every
/// answer of `a` is paired with every answer of `b`.
pub fn group_cross_table(a: &PooledReaderPairs, b: &PooledReaderPairs) -> ConfusionMatrix {
    let cb = b.answer_counts();
    let mut t = [[0.0; 3]; 3];
    for (image, ca) in a.answer_counts() {
        if let Some(cb) = cb.get(image) {
            for i in 0..3 {
                for j in 0..3 {
                    t[i][j] += ca[i] * cb[j];
                }
            }
        }
    }
    ConfusionMatrix::from_counts(t)
}

/// Cohen's kappa on [`group_cross_table`]. `None` when undefined.
pub fn group_vs_group_kappa(a: &PooledReaderPairs, b: &PooledReaderPairs) -> Option<f64> {
    let t = group_cross_table(a, b);
    if t.total() <= 0.0 {
        return None;
    }
    cohen_kappa(&t).ok()
}

/// Age bands used for subgroup analysis. Lower edges are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum AgeBand {
    #[serde(rename = "<60")]
    Under60,
    #[serde(rename = "60-69")]
    From60To69,
    #[serde(rename = ">=70")]
    From70,
}

impl AgeBand {
    pub const ALL: [AgeBand; 3] = [AgeBand::Under60, AgeBand::From60To69, AgeBand::From70];

    pub fn of(age: f64) -> AgeBand {
        if age < 60.0 {
            AgeBand::Under60
        } else if age < 70.0 {
            AgeBand::From60To69
        } else {
            AgeBand::From70
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgeBand::Under60 => "<60",
            AgeBand::From60To69 => "60-69",
            AgeBand::From70 => ">=70",
        }
    }
}

impl fmt::Display for AgeBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgeBand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "<60" | "under60" => Ok(AgeBand::Under60),
            "60-69" => Ok(AgeBand::From60To69),
            ">=70" | "70+" => Ok(AgeBand::From70),
            other => Err(format!("unknown age band {other:?}")),
        }
    }
}

/// Conjunction of optional metadata predicates. String fields compare
/// case-insensitively; records lacking a constrained field are dropped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubgroupFilter {
    pub sex: Option<String>,
    pub age_band: Option<AgeBand>,
    pub center: Option<String>,
    pub modality: Option<String>,
}

fn field_matches(want: &Option<String>, have: &Option<String>) -> bool {
    match (want, have) {
        (None, _) => true,
        (Some(w), Some(h)) => w.trim().eq_ignore_ascii_case(h.trim()),
        (Some(_), None) => false,
    }
}

pub fn subgroup(ds: &Dataset, f: &SubgroupFilter) -> Result<Dataset, DataError> {
    ds.filter(|r| {
        field_matches(&f.sex, &r.sex)
            && field_matches(&f.center, &r.center)
            && field_matches(&f.modality, &r.modality)
            && f.age_band
                .is_none_or(|band| r.age_years().map(AgeBand::of) == Some(band))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PredictionRecord;
    use ClassLabel::{Aegja as A, Control as C, Eegja as E};

    fn rec(img: &str, pid: &str, truth: ClassLabel, probs: [f64; 3]) -> PredictionRecord {
        PredictionRecord::new(img, pid, truth, probs)
    }

    #[test]
    fn mean_aggregate_examples() {
        let ds = Dataset::new(vec![
            rec("i1", "p1", E, [0.2, 0.3, 0.5]),
            rec("i2", "p1", E, [0.4, 0.5, 0.1]),
            rec("i3", "p2", A, [0.4, 0.4, 0.2]),
        ])
        .unwrap();
        let pp = patient_mean_aggregate(&ds);
        assert_eq!(pp.len(), 2);
        for (got, want) in pp[0].mean_probs.iter().zip([0.3, 0.4, 0.3]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(pp[0].pred, E);
        assert_eq!(pp[0].image_count, 2);
        assert_eq!(pp[1].mean_probs, [0.4, 0.4, 0.2]);
        assert_eq!(pp[1].pred, A);
    }

    #[test]
    fn max_aggregate_example() {
        let ds = Dataset::new(vec![
            rec("i1", "p1", E, [0.2, 0.3, 0.5]),
            rec("i2", "p1", E, [0.4, 0.5, 0.1]),
        ])
        .unwrap();
        let pp = patient_max_aggregate(&ds);
        let want = [0.4 / 1.4, 0.5 / 1.4, 0.5 / 1.4];
        for (g, w) in pp[0].mean_probs.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((pp[0].mean_probs[0] - 0.2857).abs() < 1e-4);
        assert_eq!(pp[0].pred, E);
    }

    #[test]
    fn weighted_accuracy_hand_case() {
        let ds = Dataset::new(vec![
            rec("i1", "p1", A, [0.9, 0.05, 0.05]),
            rec("i2", "p1", A, [0.8, 0.1, 0.1]),
            rec("i3", "p2", C, [0.7, 0.2, 0.1]),
        ])
        .unwrap();
        assert_eq!(inverse_count_weights(&ds), vec![0.5, 0.5, 1.0]);
        let ev = evaluate(&ds, EvalLevel::Weighted).unwrap();
        assert_eq!(ev.report.n, 2.0);
        let cm = &ev.report.confusion_matrix;
        assert_eq!(cm.trace() / cm.total(), 0.5);
    }

    #[test]
    fn patient_level_106_of_112() {
        let mut records = Vec::new();
        for p in 0..112 {
            let truth = ClassLabel::ALL[p % 3];
            let pred = if p < 106 { truth } else { ClassLabel::ALL[(p + 1) % 3] };
            let mut probs = [0.1; 3];
            probs[pred.index()] = 0.8;
            records.push(rec(&format!("i{p}a"), &format!("p{p}"), truth, probs));
            records.push(rec(&format!("i{p}b"), &format!("p{p}"), truth, probs));
        }
        let ds = Dataset::new(records).unwrap();
        let ev = evaluate(&ds, EvalLevel::Patient).unwrap();
        assert_eq!(ev.report.n, 112.0);
        let cm = &ev.report.confusion_matrix;
        let acc = cm.trace() / cm.total();
        assert_eq!(format!("{acc:.4}"), "0.9464");
        assert_eq!(ev.report.patients.as_ref().unwrap().len(), 112);
    }

    #[test]
    fn single_patient_report() {
        let ds = Dataset::new(vec![
            rec("i1", "p1", C, [0.1, 0.1, 0.8]),
            rec("i2", "p1", C, [0.2, 0.1, 0.7]),
        ])
        .unwrap();
        let ev = evaluate(&ds, EvalLevel::Patient).unwrap();
        assert_eq!(ev.report.n, 1.0);
        assert_eq!(ev.report.patients.unwrap().len(), 1);
    }

    #[test]
    fn unit_weights_match_image_level() {
        let ds = Dataset::new(vec![
            rec("i1", "p1", A, [0.7, 0.2, 0.1]),
            rec("i2", "p2", E, [0.3, 0.6, 0.1]),
            rec("i3", "p3", C, [0.5, 0.1, 0.4]),
            rec("i4", "p4", A, [0.2, 0.2, 0.6]),
        ])
        .unwrap();
        let a = evaluate(&ds, EvalLevel::Image).unwrap().report;
        let b = evaluate(&ds, EvalLevel::Weighted).unwrap().report;
        assert_eq!(a.per_class, b.per_class);
        assert_eq!(a.overall, b.overall);
        assert_eq!(a.auc_micro, b.auc_micro);
        assert_eq!(a.ap_micro, b.ap_micro);
        assert_eq!(a.kappa, b.kappa);
    }

    fn readers_for(ds: &Dataset, n: usize, same_as_model: bool) -> Vec<ReaderRecord> {
        let mut out = Vec::new();
        for r in 0..n {
            for (i, rec) in ds.records().iter().enumerate() {
                let pred = if same_as_model || (i + r) % 4 != 0 {
                    rec.predicted()
                } else {
                    ClassLabel::ALL[(rec.predicted().index() + 1) % 3]
                };
                out.push(ReaderRecord {
                    reader_id: format!("r{r}"),
                    group: ReaderGroup::Expert,
                    arm: Arm::A,
                    image_id: rec.image_id.clone(),
                    pred,
                    elapsed_s: None,
                });
            }
        }
        out
    }

    fn small_ds() -> Dataset {
        Dataset::new(vec![
            rec("i1", "p1", A, [0.7, 0.2, 0.1]),
            rec("i2", "p2", E, [0.3, 0.6, 0.1]),
            rec("i3", "p3", C, [0.5, 0.1, 0.4]),
            rec("i4", "p4", C, [0.2, 0.2, 0.6]),
        ])
        .unwrap()
    }

    #[test]
    fn pooling_counts_and_identity() {
        let ds = small_ds();
        let rs = readers_for(&ds, 5, true);
        let pooled = pool_readers(&rs, &ds, ReaderGroup::Expert, Arm::A).unwrap();
        assert_eq!(pooled.observations.len(), 20);
        assert_eq!(pooled.reader_count, 5);
        assert_eq!(pooled.mean_elapsed_s, None);
        let k = crate::stats::kappa_test(&pooled.reader_preds(), &pooled.model_preds()).unwrap();
        assert!((k.detail["kappa"] - 1.0).abs() < 1e-12);
        let ev = pooled.evaluate().unwrap();
        let model = evaluate(&ds, EvalLevel::Image).unwrap();
        assert_eq!(ev.report.accuracy(), model.report.accuracy());
    }

    #[test]
    fn single_reader_equals_individual() {
        let ds = small_ds();
        let rs = readers_for(&ds, 1, false);
        let pooled = pool_readers(&rs, &ds, ReaderGroup::Expert, Arm::A).unwrap();
        let direct = build_report(ReportInput {
            level: EvalLevel::Image,
            truths: &ds.records().iter().map(|r| r.truth).collect::<Vec<_>>(),
            preds: &rs.iter().map(|r| r.pred).collect::<Vec<_>>(),
            probs: None,
            weights: None,
        })
        .unwrap();
        assert_eq!(pooled.evaluate().unwrap().report, direct.report);
    }

    #[test]
    fn reader_permutation_invariance() {
        let ds = small_ds();
        let rs = readers_for(&ds, 3, false);
        let mut rev = rs.clone();
        rev.reverse();
        let a = pool_readers(&rs, &ds, ReaderGroup::Expert, Arm::A).unwrap();
        let b = pool_readers(&rev, &ds, ReaderGroup::Expert, Arm::A).unwrap();
        assert_eq!(a.evaluate().unwrap().report, b.evaluate().unwrap().report);
    }

    #[test]
    fn dangling_image_is_error() {
        let ds = small_ds();
        let mut rs = readers_for(&ds, 1, true);
        rs[0].image_id = "nope".into();
        let err = pool_readers(&rs, &ds, ReaderGroup::Expert, Arm::A).unwrap_err();
        assert!(matches!(err, AggregationError::DanglingImage { .. }));
    }

    #[test]
    fn group_cross_table_counts_all_pairs() {
        let ds = small_ds();
        let rs = readers_for(&ds, 2, true);
        let a = pool_readers(&rs, &ds, ReaderGroup::Expert, Arm::A).unwrap();
        assert_eq!(group_cross_table(&a, &a).total(), 4.0 * 2.0 * 2.0);
        assert_eq!(group_vs_group_kappa(&a, &a), Some(1.0));
    }

    #[test]
    fn age_band_edges() {
        assert_eq!(AgeBand::of(59.9), AgeBand::Under60);
        assert_eq!(AgeBand::of(60.0), AgeBand::From60To69);
        assert_eq!(AgeBand::of(69.99), AgeBand::From60To69);
        assert_eq!(AgeBand::of(70.0), AgeBand::From70);
    }

    #[test]
    fn subgroup_filters() {
        let mut recs = vec![
            rec("i1", "p1", A, [0.7, 0.2, 0.1]),
            rec("i2", "p2", E, [0.3, 0.6, 0.1]),
            rec("i3", "p3", C, [0.5, 0.1, 0.4]),
        ];
        recs[0].sex = Some("male".into());
        recs[0].age = Some("72".into());
        recs[1].sex = Some("Female".into());
        recs[1].age = Some("60".into());
        recs[2].sex = Some("MALE".into());
        let ds = Dataset::new(recs).unwrap();
        let males = subgroup(&ds, &SubgroupFilter { sex: Some("male".into()), ..Default::default() }).unwrap();
        assert_eq!(males.len(), 2);
        let mid = subgroup(&ds, &SubgroupFilter { age_band: Some(AgeBand::From60To69), ..Default::default() }).unwrap();
        assert_eq!(mid.records()[0].image_id, "i2");
        let none = subgroup(&ds, &SubgroupFilter { center: Some("x".into()), ..Default::default() });
        assert_eq!(none.unwrap_err(), DataError::EmptySubgroup);
    }
}
