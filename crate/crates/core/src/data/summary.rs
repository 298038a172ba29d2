use std::collections::BTreeMap;

use serde::Serialize;

use super::{ClassLabel, Dataset};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCount {
    pub patients: usize,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgeSummary {
    /// Patients with a parseable age.
    pub known: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Patient counts for `<60`, `60-69`, `>=70`.
    pub bands: BTreeMap<String, usize>,
}

/// Table-1 style composition of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub patients: usize,
    pub images: usize,
    /// Keyed by class name, canonical order.
    pub per_class: indexmap::IndexMap<String, ClassCount>,
    /// Keyed by the raw sex value; patients without one fall under `"unknown"`.
    pub by_sex: BTreeMap<String, ClassCount>,
    pub age: AgeSummary,
}

pub fn summarize(ds: &Dataset) -> DatasetSummary {
    let mut per_class = [ClassCount::default(); 3];
    let mut by_sex: BTreeMap<String, ClassCount> = BTreeMap::new();
    let mut ages = Vec::new();
    let mut bands: BTreeMap<String, usize> = crate::aggregation::AgeBand::ALL
        .iter()
        .map(|b| (b.as_str().to_string(), 0))
        .collect();

    for members in ds.patient_index().values() {
        let first = &ds.records()[members[0]];
        let c = &mut per_class[first.truth.index()];
        c.patients += 1;
        c.images += members.len();

        let sex = members
            .iter()
            .find_map(|&i| ds.records()[i].sex.clone())
            .unwrap_or_else(|| "unknown".to_string());
        let s = by_sex.entry(sex).or_default();
        s.patients += 1;
        s.images += members.len();

        if let Some(age) = members.iter().find_map(|&i| ds.records()[i].age_years()) {
            ages.push(age);
            let band = crate::aggregation::AgeBand::of(age);
            *bands.entry(band.as_str().to_string()).or_default() += 1;
        }
    }

    let age = AgeSummary {
        known: ages.len(),
        mean: (!ages.is_empty()).then(|| ages.iter().sum::<f64>() / ages.len() as f64),
        min: ages.iter().copied().reduce(f64::min),
        max: ages.iter().copied().reduce(f64::max),
        bands,
    };

    DatasetSummary {
        patients: ds.patient_count(),
        images: ds.len(),
        per_class: ClassLabel::ALL
            .iter()
            .map(|c| (c.as_str().to_string(), per_class[c.index()]))
            .collect(),
        by_sex,
        age,
    }
}
