use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldUnit {
    Patient,
    Image,
}

impl fmt::Display for FoldUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FoldUnit::Patient => "patient",
            FoldUnit::Image => "image",
        })
    }
}

impl FromStr for FoldUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "patient" => Ok(FoldUnit::Patient),
            "image" => Ok(FoldUnit::Image),
            other => Err(format!("unknown fold unit {other:?}")),
        }
    }
}

/// Assignment of every unit (patient id or image id) to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSpec {
    pub k: usize,
    pub unit: FoldUnit,
    pub seed: u64,
    /// Unit id to fold index, in dataset order.
    pub assignments: IndexMap<String, usize>,
}

impl FoldSpec {
    /// Fold index of the record at `position` in `ds`.
    pub fn fold_of_record(&self, ds: &Dataset, position: usize) -> usize {
        let r = &ds.records()[position];
        let key = match self.unit {
            FoldUnit::Patient => &r.patient_id,
            FoldUnit::Image => &r.image_id,
        };
        self.assignments[key.as_str()]
    }

    /// Record positions in each fold.
    pub fn record_folds(&self, ds: &Dataset) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for i in 0..ds.len() {
            out[self.fold_of_record(ds, i)].push(i);
        }
        out
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Randomly partitions patients (or images) into `k` mutually exclusive
/// folds whose sizes differ by at most one unit.
pub fn kfold_split(ds: &Dataset, k: usize, unit: FoldUnit, seed: u64) -> Result<FoldSpec, DataError> {
    if k < 2 {
        return Err(DataError::InvalidK(k));
    }
    let units: Vec<&str> = match unit {
        FoldUnit::Patient => ds.patient_index().keys().map(String::as_str).collect(),
        FoldUnit::Image => ds.records().iter().map(|r| r.image_id.as_str()).collect(),
    };
    if units.len() < k {
        return Err(DataError::TooFewUnits {
            unit,
            k,
            available: units.len(),
        });
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0usize; units.len()];
    for (slot, &u) in order.iter().enumerate() {
        fold_of[u] = slot % k;
    }
    let assignments = units
        .iter()
        .zip(fold_of)
        .map(|(u, f)| (u.to_string(), f))
        .collect();
    Ok(FoldSpec {
        k,
        unit,
        seed,
        assignments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClassLabel, PredictionRecord};
    use proptest::prelude::*;

    fn dataset(patient_sizes: &[usize]) -> Dataset {
        let mut recs = Vec::new();
        for (p, &n) in patient_sizes.iter().enumerate() {
            let c = ClassLabel::ALL[p % 3];
            for i in 0..n {
                let mut probs = [0.0; 3];
                probs[c.index()] = 1.0;
                recs.push(PredictionRecord::new(format!("p{p}i{i}"), format!("p{p}"), c, probs));
            }
        }
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn ten_patients_five_folds() {
        let ds = dataset(&[3, 1, 2, 5, 1, 1, 4, 2, 2, 1]);
        let f = kfold_split(&ds, 5, FoldUnit::Patient, 7).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn eleven_images_five_folds() {
        let ds = dataset(&[11]);
        let f = kfold_split(&ds, 5, FoldUnit::Image, 1).unwrap();
        let mut sizes = f.fold_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn same_seed_same_assignment() {
        let ds = dataset(&[2; 20]);
        let a = kfold_split(&ds, 5, FoldUnit::Patient, 99).unwrap();
        let b = kfold_split(&ds, 5, FoldUnit::Patient, 99).unwrap();
        assert_eq!(a, b);
        let c = kfold_split(&ds, 5, FoldUnit::Patient, 100).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn too_few_units() {
        let ds = dataset(&[4, 4]);
        assert!(matches!(
            kfold_split(&ds, 5, FoldUnit::Patient, 0),
            Err(DataError::TooFewUnits { available: 2, .. })
        ));
        assert!(kfold_split(&ds, 5, FoldUnit::Image, 0).is_ok());
        assert!(matches!(kfold_split(&ds, 1, FoldUnit::Image, 0), Err(DataError::InvalidK(1))));
    }

    proptest! {
        #[test]
        fn folds_partition_units(
            sizes in proptest::collection::vec(1usize..5, 2..30),
            k in 2usize..6,
            seed in any::<u64>(),
            by_patient in any::<bool>(),
        ) {
            let ds = dataset(&sizes);
            let unit = if by_patient { FoldUnit::Patient } else { FoldUnit::Image };
            let n_units = if by_patient { ds.patient_count() } else { ds.len() };
            prop_assume!(n_units >= k);
            let spec = kfold_split(&ds, k, unit, seed).unwrap();

            // exhaustive pairwise disjointness and coverage
            let folds = spec.record_folds(&ds);
            let mut seen = vec![0usize; ds.len()];
            for (a, fa) in folds.iter().enumerate() {
                for &i in fa {
                    seen[i] += 1;
                }
                for fb in folds.iter().skip(a + 1) {
                    prop_assert!(fa.iter().all(|i| !fb.contains(i)));
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));

            let fs = spec.fold_sizes();
            prop_assert!(fs.iter().max().unwrap() - fs.iter().min().unwrap() <= 1);

            if by_patient {
                for members in ds.patient_index().values() {
                    let f0 = spec.fold_of_record(&ds, members[0]);
                    prop_assert!(members.iter().all(|&i| spec.fold_of_record(&ds, i) == f0));
                }
            }
        }
    }
}
