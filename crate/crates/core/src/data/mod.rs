//! Class labels, prediction and reader records, and the patient-indexed dataset.

mod folds;
mod io;
mod summary;
mod synth;

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use folds::{kfold_split, FoldSpec, FoldUnit};
pub use io::{
    parse_predictions, parse_readers, write_predictions, write_readers, ParsedPredictions,
};
pub use summary::{summarize, AgeSummary, ClassCount, DatasetSummary};
pub use synth::{synth_generate, synth_readers, ReaderSynthSpec, SynthSpec};

/// Strict tolerance on `|sum(probs) - 1|`.
pub const PROB_SUM_STRICT_TOL: f64 = 1e-6;
/// Lenient tolerance; vectors inside it are renormalized with a warning.
pub const PROB_SUM_RENORM_TOL: f64 = 1e-3;
/// Two probabilities closer than this are treated as tied by [`argmax_severity`].
pub const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("row {row}: malformed record: {msg}")]
    Malformed { row: u64, msg: String },
    #[error("row {row}: unknown label {value:?}")]
    UnknownLabel { row: u64, value: String },
    #[error("row {row}: probability {value} outside [0, 1]")]
    ProbOutOfRange { row: u64, value: f64 },
    #[error("row {row}: probability sum {sum} exceeds tolerance")]
    ProbSum { row: u64, sum: f64 },
    #[error("row {row}: duplicate image_id {image_id:?}")]
    DuplicateImage { row: u64, image_id: String },
    #[error("patient {patient_id:?} has conflicting truths ({first} vs {second})")]
    ConflictingTruth {
        patient_id: String,
        first: ClassLabel,
        second: ClassLabel,
    },
    #[error("row {row}: duplicate reader response ({reader_id:?}, {image_id:?})")]
    DuplicateResponse {
        row: u64,
        reader_id: String,
        image_id: String,
    },
    #[error("missing column {0:?} in header")]
    MissingColumn(String),
    #[error("unknown column {0:?} in header")]
    UnknownColumn(String),
    #[error("too few {unit}s for {k} folds: have {available}")]
    TooFewUnits {
        unit: FoldUnit,
        k: usize,
        available: usize,
    },
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("subgroup is empty")]
    EmptySubgroup,
    #[error("dataset is empty")]
    Empty,
    #[error("io: {0}")]
    Io(String),
}

/// The three diagnostic classes, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "A-EGJA")]
    Aegja,
    #[serde(rename = "E-EGJA")]
    Eegja,
    #[serde(rename = "control")]
    Control,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Aegja, ClassLabel::Eegja, ClassLabel::Control];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Aegja => 0,
            ClassLabel::Eegja => 1,
            ClassLabel::Control => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Aegja => "A-EGJA",
            ClassLabel::Eegja => "E-EGJA",
            ClassLabel::Control => "control",
        }
    }

    /// Lowercase identifier used in file names and CLI flags.
    pub fn slug(self) -> &'static str {
        match self {
            ClassLabel::Aegja => "aegja",
            ClassLabel::Eegja => "eegja",
            ClassLabel::Control => "control",
        }
    }

    /// Higher is more severe: A-EGJA > E-EGJA > control.
    pub fn severity(self) -> u8 {
        match self {
            ClassLabel::Aegja => 2,
            ClassLabel::Eegja => 1,
            ClassLabel::Control => 0,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown class label {0:?}")]
pub struct ParseLabelError(pub String);

impl FromStr for ClassLabel {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a-egja" | "aegja" | "0" => Ok(ClassLabel::Aegja),
            "e-egja" | "eegja" | "1" => Ok(ClassLabel::Eegja),
            "control" | "2" => Ok(ClassLabel::Control),
            _ => Err(ParseLabelError(s.to_string())),
        }
    }
}

/// Argmax over a class-probability vector. Ties (within [`TIE_EPS`]) go to
/// the most severe class.
pub fn argmax_severity(probs: &[f64; 3]) -> ClassLabel {
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // canonical order is already descending severity
    ClassLabel::ALL
        .into_iter()
        .find(|c| probs[c.index()] >= max - TIE_EPS)
        .unwrap_or(ClassLabel::Aegja)
}

/// One image's model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub patient_id: String,
    pub truth: ClassLabel,
    pub probs: [f64; 3],
    pub center: Option<String>,
    pub modality: Option<String>,
    pub sex: Option<String>,
    /// Kept as the raw string from the file; see [`PredictionRecord::age_years`].
    pub age: Option<String>,
}

impl PredictionRecord {
    pub fn new(
        image_id: impl Into<String>,
        patient_id: impl Into<String>,
        truth: ClassLabel,
        probs: [f64; 3],
    ) -> Self {
        Self {
            image_id: image_id.into(),
            patient_id: patient_id.into(),
            truth,
            probs,
            center: None,
            modality: None,
            sex: None,
            age: None,
        }
    }

    pub fn predicted(&self) -> ClassLabel {
        argmax_severity(&self.probs)
    }

    pub fn age_years(&self) -> Option<f64> {
        self.age
            .as_deref()
            .and_then(|a| a.trim().parse::<f64>().ok())
            .filter(|a| a.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReaderGroup {
    Trainee,
    Competent,
    Expert,
}

impl ReaderGroup {
    pub const ALL: [ReaderGroup; 3] = [
        ReaderGroup::Trainee,
        ReaderGroup::Competent,
        ReaderGroup::Expert,
    ];

    pub fn index(self) -> usize {
        match self {
            ReaderGroup::Trainee => 0,
            ReaderGroup::Competent => 1,
            ReaderGroup::Expert => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReaderGroup::Trainee => "trainee",
            ReaderGroup::Competent => "competent",
            ReaderGroup::Expert => "expert",
        }
    }
}

impl FromStr for ReaderGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "trainee" => Ok(ReaderGroup::Trainee),
            "competent" => Ok(ReaderGroup::Competent),
            "expert" => Ok(ReaderGroup::Expert),
            other => Err(format!("unknown reader group {other:?}")),
        }
    }
}

impl fmt::Display for ReaderGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reading arm: A is unaided, B is model-assisted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    A,
    B,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::A => "A",
            Arm::B => "B",
        }
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Arm::A),
            "B" | "b" => Ok(Arm::B),
            other => Err(format!("unknown arm {other:?}")),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One reader's answer on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderRecord {
    pub reader_id: String,
    pub group: ReaderGroup,
    pub arm: Arm,
    pub image_id: String,
    pub pred: ClassLabel,
    pub elapsed_s: Option<f64>,
}

/// Immutable collection of prediction records indexed by patient.
///
/// Patients are kept in first-appearance order so every downstream
/// iteration is deterministic for a given file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<PredictionRecord>,
    patient_index: IndexMap<String, Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset, enforcing the strict probability tolerance,
    /// unique image ids and one truth per patient.
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self, DataError> {
        for (i, r) in records.iter().enumerate() {
            check_probs(&r.probs, i as u64 + 1, true)?;
        }
        Self::from_checked(records, |i| i as u64 + 1)
    }

    /// Cross-record validation only; `row_of` maps a record position to the
    /// row number reported in errors.
    pub(crate) fn from_checked(
        records: Vec<PredictionRecord>,
        row_of: impl Fn(usize) -> u64,
    ) -> Result<Self, DataError> {
        let mut seen = std::collections::HashSet::with_capacity(records.len());
        let mut patient_index: IndexMap<String, Vec<usize>> = IndexMap::new();
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.image_id.as_str()) {
                return Err(DataError::DuplicateImage {
                    row: row_of(i),
                    image_id: r.image_id.clone(),
                });
            }
            let members = patient_index.entry(r.patient_id.clone()).or_default();
            if let Some(&first) = members.first() {
                let first_truth = records[first].truth;
                if first_truth != r.truth {
                    return Err(DataError::ConflictingTruth {
                        patient_id: r.patient_id.clone(),
                        first: first_truth,
                        second: r.truth,
                    });
                }
            }
            members.push(i);
        }
        Ok(Self {
            records,
            patient_index,
        })
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn patient_index(&self) -> &IndexMap<String, Vec<usize>> {
        &self.patient_index
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patient_count(&self) -> usize {
        self.patient_index.len()
    }

    /// Records of one patient, in file order.
    pub fn patient_records<'a>(
        &'a self,
        patient_id: &str,
    ) -> impl Iterator<Item = &'a PredictionRecord> + 'a {
        self.patient_index
            .get(patient_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.records[i])
    }

    pub fn find(&self, image_id: &str) -> Option<&PredictionRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Image-id lookup table.
    pub fn image_lookup(&self) -> std::collections::HashMap<&str, &PredictionRecord> {
        self.records
            .iter()
            .map(|r| (r.image_id.as_str(), r))
            .collect()
    }

    /// Keeps the records matching `keep`. An empty result is an error.
    pub fn filter(&self, mut keep: impl FnMut(&PredictionRecord) -> bool) -> Result<Dataset, DataError> {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        if records.is_empty() {
            return Err(DataError::EmptySubgroup);
        }
        Self::from_checked(records, |i| i as u64 + 1)
    }

    /// Records at the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Result<Dataset, DataError> {
        let records: Vec<_> = positions.iter().map(|&i| self.records[i].clone()).collect();
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        Self::from_checked(records, |i| i as u64 + 1)
    }
}

/// Validates a probability vector. In lenient mode returns `Some(renormalized)`
/// when the sum was off by more than the strict tolerance but within the
/// renormalization tolerance.
pub(crate) fn check_probs(
    probs: &[f64; 3],
    row: u64,
    strict: bool,
) -> Result<Option<[f64; 3]>, DataError> {
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(DataError::ProbOutOfRange { row, value: p });
        }
    }
    let sum: f64 = probs.iter().sum();
    let dev = (sum - 1.0).abs();
    if dev <= PROB_SUM_STRICT_TOL {
        return Ok(None);
    }
    if !strict && dev <= PROB_SUM_RENORM_TOL {
        return Ok(Some([probs[0] / sum, probs[1] / sum, probs[2] / sum]));
    }
    Err(DataError::ProbSum { row, sum })
}
