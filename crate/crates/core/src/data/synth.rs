//! Seeded fixture generators for prediction and reader files.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Arm, ClassLabel, Dataset, PredictionRecord, ReaderGroup, ReaderRecord};

/// Configuration for [`synth_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Patients per class, canonical order.
    pub patients_per_class: [usize; 3],
    pub images_min: usize,
    pub images_max: usize,
    /// Logit shift of the true class. `f64::INFINITY` yields one-hot vectors.
    pub separation: f64,
    /// Per-image logit noise.
    pub image_sd: f64,
    /// Per-patient logit offset shared by all of a patient's images.
    pub patient_sd: f64,
    /// Emit sex and age columns.
    pub metadata: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            patients_per_class: [44, 18, 50],
            images_min: 1,
            images_max: 20,
            separation: 3.0,
            image_sd: 1.0,
            patient_sd: 0.5,
            metadata: true,
            seed: 0,
        }
    }
}

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Draws class-conditional logit-normal probability vectors.
///
/// Each image's logits are `separation * e_truth + patient_offset + noise`;
/// the probability vector is their softmax. Output is a pure function of
/// the spec.
pub fn synth_generate(spec: &SynthSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let image_noise = Normal::new(0.0, spec.image_sd.max(0.0)).expect("finite sd");
    let patient_noise = Normal::new(0.0, spec.patient_sd.max(0.0)).expect("finite sd");
    let lo = spec.images_min.max(1);
    let hi = spec.images_max.max(lo);

    let mut records = Vec::new();
    let mut patient_no = 0usize;
    for class in ClassLabel::ALL {
        for _ in 0..spec.patients_per_class[class.index()] {
            patient_no += 1;
            let patient_id = format!("P{patient_no:04}");
            let n_images = rng.random_range(lo..=hi);
            let offset: [f64; 3] = std::array::from_fn(|_| patient_noise.sample(&mut rng));
            let sex = if rng.random_bool(0.5) { "male" } else { "female" };
            let age: u32 = rng.random_range(35..=85);
            for j in 0..n_images {
                let probs = if spec.separation.is_infinite() {
                    let mut p = [0.0; 3];
                    p[class.index()] = 1.0;
                    p
                } else {
                    let z: [f64; 3] = std::array::from_fn(|k| {
                        let shift = if k == class.index() { spec.separation } else { 0.0 };
                        shift + offset[k] + image_noise.sample(&mut rng)
                    });
                    softmax3(z)
                };
                let mut r = PredictionRecord::new(
                    format!("{patient_id}-{:02}", j + 1),
                    patient_id.clone(),
                    class,
                    probs,
                );
                if spec.metadata {
                    r.sex = Some(sex.to_string());
                    r.age = Some(age.to_string());
                }
                records.push(r);
            }
        }
    }
    Dataset::new(records).expect("generated records are valid")
}

/// Configuration for [`synth_readers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderSynthSpec {
    pub readers_per_group: usize,
    /// Probability of a correct answer, indexed by `[group][arm]`.
    pub accuracy: [[f64; 2]; 3],
    /// Mean seconds per image; `None` omits the timing column.
    pub mean_elapsed_s: Option<f64>,
    pub seed: u64,
}

impl Default for ReaderSynthSpec {
    fn default() -> Self {
        Self {
            readers_per_group: 5,
            accuracy: [[0.70, 0.85], [0.74, 0.85], [0.81, 0.87]],
            mean_elapsed_s: Some(6.0),
            seed: 0,
        }
    }
}

/// Every reader of every (group, arm) answers every image of `ds`.
pub fn synth_readers(ds: &Dataset, spec: &ReaderSynthSpec) -> Vec<ReaderRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    for group in ReaderGroup::ALL {
        for (a, arm) in [Arm::A, Arm::B].into_iter().enumerate() {
            let acc = spec.accuracy[group.index()][a].clamp(0.0, 1.0);
            for r in 0..spec.readers_per_group {
                let reader_id = format!("{}{}-{}", group.as_str(), arm.as_str(), r + 1);
                for rec in ds.records() {
                    let pred = if rng.random_bool(acc) {
                        rec.truth
                    } else {
                        let shift = rng.random_range(1..3);
                        ClassLabel::ALL[(rec.truth.index() + shift) % 3]
                    };
                    let elapsed_s = spec
                        .mean_elapsed_s
                        .map(|m| (m * rng.random_range(0.5..1.5) * 100.0).round() / 100.0);
                    out.push(ReaderRecord {
                        reader_id: reader_id.clone(),
                        group,
                        arm,
                        image_id: rec.image_id.clone(),
                        pred,
                        elapsed_s,
                    });
                }
            }
        }
    }
    out
}
