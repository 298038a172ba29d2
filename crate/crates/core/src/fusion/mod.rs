//! Element-wise gated fusion head over two feature branches.
//!
//! The head takes a transformer-style branch (a class token plus a spatial
//! grid) and a convolutional branch (a spatial grid with its own channel
//! count), pools and projects the second onto the first's channels, mixes
//! the two per channel with a small gating network and classifies the
//! result into three classes. Everything runs in `f64`.

mod features;
mod gradcheck;
mod model;
mod optim;
mod params;
mod train;

use thiserror::Error;

pub use features::{read_feature_bundle, read_branch_pair, write_feature_bundle, LabeledBundle};
pub use gradcheck::{grad_check, grad_check_random, GradCheckReport};
pub use model::{
    align_res, backward, ce_loss, classify, combine_dino, forward, gate_forward, softmax,
    DropoutMasks, FeatureBundle, Forward, GateOutput, Grid, CE_PROB_FLOOR,
};
pub use optim::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{AlignParams, ClassifierParams, GatingParams, HeadDims, HeadParams, PARAMS_VERSION};
pub use train::{
    make_toy_data, train_head, train_toy, EpochLog, ToyData, ToySpec, TrainOutcome, TrainSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("unsupported parameter file version {0}")]
    Version(u32),
    #[error("feature file: {0}")]
    Features(String),
    #[error("json: {0}")]
    Json(String),
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), FusionError> {
    if expected == got {
        Ok(())
    } else {
        Err(FusionError::DimMismatch { what, expected, got })
    }
}
