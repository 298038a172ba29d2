use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::model::{accumulate_grad, ce_loss, forward, DropoutMasks, FeatureBundle, Grid};
use super::optim::{adam_step, AdamState};
use super::params::{HeadDims, HeadParams};
use super::FusionError;
use crate::data::{argmax_severity, ClassLabel};
use crate::metrics::{build_report, EvalLevel, Evaluation, ReportInput};

/// Synthetic class-cluster features.
///
/// Every channel of both branches has a class centroid at `±margin·sd/2`
/// with a random sign per (class, channel), so two classes whose signs
/// differ on a channel sit `margin` standard deviations apart there.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub dims: HeadDims,
    pub grid: (usize, usize),
    pub samples: usize,
    pub holdout_frac: f64,
    pub margin: f64,
    pub noise_sd: f64,
    /// Permute the training labels (the held-out labels stay intact).
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            dims: HeadDims::toy(),
            grid: (2, 2),
            samples: 2000,
            holdout_frac: 0.2,
            margin: 3.0,
            noise_sd: 1.0,
            shuffle_labels: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 128,
            lr: 1e-4,
            dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub train: Vec<(FeatureBundle, usize)>,
    pub test: Vec<(FeatureBundle, usize)>,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn make_toy_data(spec: &ToySpec) -> Result<ToyData, FusionError> {
    spec.dims.validate()?;
    if spec.samples < 6 || !(0.0..1.0).contains(&spec.holdout_frac) || spec.holdout_frac == 0.0 {
        return Err(FusionError::BadConfig(
            "need at least 6 samples and a holdout fraction in (0, 1)".into(),
        ));
    }
    let (gh, gw) = spec.grid;
    if gh == 0 || gw == 0 {
        return Err(FusionError::BadConfig("grid dims must be positive".into()));
    }
    let HeadDims { c, c_res, .. } = spec.dims;
    let mut rng = seeded(spec.seed, 1);
    let half = spec.margin * spec.noise_sd / 2.0;
    let mut centroids = |n: usize| -> Vec<Vec<f64>> {
        (0..3)
            .map(|_| (0..n).map(|_| if rng.random_bool(0.5) { half } else { -half }).collect())
            .collect()
    };
    let cent_dino = centroids(c);
    let cent_res = centroids(c_res);

    let sd = spec.noise_sd;
    let mut samples: Vec<(FeatureBundle, usize)> = (0..spec.samples)
        .map(|i| {
            let k = i % 3;
            let mut noise = |mu: f64| mu + sd * rng.sample::<f64, _>(StandardNormal);
            let f_cls: Vec<f64> = cent_dino[k].iter().map(|&m| noise(m)).collect();
            let dino: Vec<f64> = (0..gh * gw * c).map(|_| noise(0.0)).collect();
            let res: Vec<f64> = (0..gh * gw)
                .flat_map(|_| cent_res[k].clone())
                .map(&mut noise)
                .collect();
            let bundle = FeatureBundle {
                f_cls,
                f_grid_dino: Grid { h: gh, w: gw, c, data: dino },
                f_grid_res: Grid { h: gh, w: gw, c: c_res, data: res },
            };
            (bundle, k)
        })
        .collect();
    samples.shuffle(&mut rng);
    // permuted over both splits so held-out labels carry no signal either
    if spec.shuffle_labels {
        let mut labels: Vec<usize> = samples.iter().map(|s| s.1).collect();
        labels.shuffle(&mut rng);
        for (s, l) in samples.iter_mut().zip(labels) {
            s.1 = l;
        }
    }

    let n_test = ((spec.samples as f64) * spec.holdout_frac).round().max(1.0) as usize;
    let test = samples.split_off(spec.samples - n_test);
    Ok(ToyData { train: samples, test })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,steps,train_loss,train_accuracy,test_loss,test_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.steps, self.train_loss, self.train_accuracy, self.test_loss, self.test_accuracy
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub log: Vec<EpochLog>,
    /// Metrics of the final head on the held-out split.
    pub evaluation: Evaluation,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from(EpochLog::CSV_HEADER);
        s.push('\n');
        for row in &self.log {
            s.push_str(&row.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Inference-mode probabilities for every sample.
fn predict(params: &HeadParams, data: &[(FeatureBundle, usize)]) -> Result<Vec<[f64; 3]>, FusionError> {
    data.iter()
        .map(|(b, _)| forward(b, params, None).map(|f| f.probs))
        .collect()
}

fn loss_and_accuracy(probs: &[[f64; 3]], data: &[(FeatureBundle, usize)]) -> (f64, f64) {
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, (_, t)) in probs.iter().zip(data) {
        loss += ce_loss(p, *t);
        if argmax_severity(p).index() == *t {
            correct += 1;
        }
    }
    (loss / n, correct as f64 / n)
}

fn evaluate_split(params: &HeadParams, data: &[(FeatureBundle, usize)]) -> Result<Evaluation, FusionError> {
    let probs = predict(params, data)?;
    let truths: Vec<ClassLabel> = data.iter().map(|(_, t)| ClassLabel::ALL[*t]).collect();
    let preds: Vec<ClassLabel> = probs.iter().map(argmax_severity).collect();
    build_report(ReportInput {
        level: EvalLevel::Image,
        truths: &truths,
        preds: &preds,
        probs: Some(&probs),
        weights: None,
    })
    .map_err(|e| FusionError::BadConfig(format!("held-out evaluation: {e}")))
}

/// Mini-batch Adam on mean cross-entropy. Epoch 0 of the log describes the
/// initial head. Deterministic for a given spec.
pub fn train_head(
    mut params: HeadParams,
    data: &ToyData,
    spec: &TrainSpec,
) -> Result<TrainOutcome, FusionError> {
    params.validate()?;
    if spec.batch == 0 || !spec.lr.is_finite() || spec.lr < 0.0 {
        return Err(FusionError::BadConfig("batch must be positive and lr finite and >= 0".into()));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(FusionError::BadConfig("empty train or test split".into()));
    }
    let mut order_rng = seeded(spec.seed, 2);
    let mut mask_rng = seeded(spec.seed, 3);
    let mut adam = AdamState::new(&params, spec.lr);
    let mut log = Vec::with_capacity(spec.epochs + 1);
    let snapshot = |params: &HeadParams, epoch: usize, steps: usize| -> Result<EpochLog, FusionError> {
        let (train_loss, train_accuracy) = loss_and_accuracy(&predict(params, &data.train)?, &data.train);
        let (test_loss, test_accuracy) = loss_and_accuracy(&predict(params, &data.test)?, &data.test);
        Ok(EpochLog {
            epoch,
            steps,
            train_loss,
            train_accuracy,
            test_loss,
            test_accuracy,
        })
    };
    log.push(snapshot(&params, 0, 0)?);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0usize;
    let mut grads = params.zeros_like();
    let dropout = params.gating.dropout;
    for epoch in 1..=spec.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(spec.batch) {
            for t in grads.tensors_mut() {
                t.iter_mut().for_each(|v| *v = 0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (bundle, truth) = &data.train[i];
                let masks = (dropout > 0.0).then(|| {
                    DropoutMasks::draw(params.dims.c, params.dims.hidden, dropout, mask_rng.random())
                });
                batch_loss += scale * accumulate_grad(bundle, *truth, &params, masks.as_ref(), scale, &mut grads)?;
            }
            if !batch_loss.is_finite() || grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(FusionError::Divergence { step, loss: batch_loss });
            }
            adam_step(&mut params, &grads, &mut adam)?;
            step += 1;
        }
        log.push(snapshot(&params, epoch, step)?);
    }
    let evaluation = evaluate_split(&params, &data.test)?;
    Ok(TrainOutcome {
        params,
        log,
        evaluation,
    })
}

/// Generates toy data, initializes a head and trains it.
pub fn train_toy(toy: &ToySpec, spec: &TrainSpec) -> Result<TrainOutcome, FusionError> {
    let data = make_toy_data(toy)?;
    let params = HeadParams::init(toy.dims, spec.dropout, spec.seed)?;
    train_head(params, &data, spec)
}
