use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, FusionError};

pub const PARAMS_VERSION: u32 = 1;

/// Channel counts of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// Channels of the class-token branch; also the fused width.
    pub c: usize,
    /// Channels of the convolutional branch before projection.
    pub c_res: usize,
    /// Hidden width of the gating network.
    pub hidden: usize,
}

impl HeadDims {
    /// Small-scale default used by the demo.
    pub fn toy() -> Self {
        Self {
            c: 64,
            c_res: 128,
            hidden: 8,
        }
    }

    /// Widths of a ViT-S/14 token branch and a ResNet-50 feature map.
    pub fn vit_s14_resnet50() -> Self {
        Self {
            c: 384,
            c_res: 2048,
            hidden: 8,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.c == 0 || self.c_res == 0 || self.hidden == 0 {
            return Err(FusionError::BadConfig(format!("all dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Pooling followed by a per-position linear map `c_res -> c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    /// Row-major `[c][c_res]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Three pointwise convolutions over the length-`c` channel sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub hidden: usize,
    pub dropout: f64,
    /// Row-major `[hidden][2]`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `[hidden][hidden]`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Row-major `[2][hidden]`.
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// Row-major `[c][3]`; logits are `weight^T f + bias`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub version: u32,
    pub dims: HeadDims,
    pub align: AlignParams,
    pub gating: GatingParams,
    pub classifier: ClassifierParams,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl HeadParams {
    /// Uniform `±sqrt(1/fan_in)` initialization for weights and biases.
    pub fn init(dims: HeadDims, dropout: f64, seed: u64) -> Result<Self, FusionError> {
        dims.validate()?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(FusionError::BadConfig(format!("dropout {dropout} outside [0, 1)")));
        }
        let HeadDims { c, c_res, hidden: h } = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            version: PARAMS_VERSION,
            dims,
            align: AlignParams {
                weight: uniform(&mut rng, c * c_res, c_res),
                bias: uniform(&mut rng, c, c_res),
            },
            gating: GatingParams {
                hidden: h,
                dropout,
                w1: uniform(&mut rng, h * 2, 2),
                b1: uniform(&mut rng, h, 2),
                w2: uniform(&mut rng, h * h, h),
                b2: uniform(&mut rng, h, h),
                w3: uniform(&mut rng, 2 * h, h),
                b3: uniform(&mut rng, 2, h),
            },
            classifier: ClassifierParams {
                weight: uniform(&mut rng, c * 3, c),
                bias: uniform(&mut rng, 3, c),
            },
        })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn tensor_names() -> [&'static str; 10] {
        [
            "align.weight",
            "align.bias",
            "gating.w1",
            "gating.b1",
            "gating.w2",
            "gating.b2",
            "gating.w3",
            "gating.b3",
            "classifier.weight",
            "classifier.bias",
        ]
    }

    pub fn tensors(&self) -> [&Vec<f64>; 10] {
        [
            &self.align.weight,
            &self.align.bias,
            &self.gating.w1,
            &self.gating.b1,
            &self.gating.w2,
            &self.gating.b2,
            &self.gating.w3,
            &self.gating.b3,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.align.weight,
            &mut self.align.bias,
            &mut self.gating.w1,
            &mut self.gating.b1,
            &mut self.gating.w2,
            &mut self.gating.b2,
            &mut self.gating.w3,
            &mut self.gating.b3,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks every tensor length against `dims` and that all entries are finite.
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.version != PARAMS_VERSION {
            return Err(FusionError::Version(self.version));
        }
        self.dims.validate()?;
        let HeadDims { c, c_res, hidden: h } = self.dims;
        check_len("gating.hidden", h, self.gating.hidden)?;
        let want = [c * c_res, c, h * 2, h, h * h, h, 2 * h, 2, c * 3, 3];
        for ((name, t), n) in Self::tensor_names().into_iter().zip(self.tensors()).zip(want) {
            check_len(name, n, t.len())?;
            if t.iter().any(|v| !v.is_finite()) {
                return Err(FusionError::BadConfig(format!("{name} has non-finite entries")));
            }
        }
        if !(0.0..1.0).contains(&self.gating.dropout) {
            return Err(FusionError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.gating.dropout
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, FusionError> {
        let p: HeadParams = serde_json::from_str(s).map_err(|e| FusionError::Json(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}
