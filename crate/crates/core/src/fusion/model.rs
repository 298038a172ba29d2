#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{AlignParams, ClassifierParams, GatingParams, HeadParams};
use super::{check_len, FusionError};

/// Probabilities are floored at this value before taking the log.
pub const CE_PROB_FLOOR: f64 = 1e-12;

/// `h x w x c` tensor, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, FusionError> {
        if h == 0 || w == 0 || c == 0 {
            return Err(FusionError::BadConfig("grid dims must be positive".into()));
        }
        check_len("grid data", h * w * c, data.len())?;
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    /// A 1x1 grid holding `v`.
    pub fn from_vector(v: Vec<f64>) -> Self {
        Self {
            h: 1,
            w: 1,
            c: v.len(),
            data: v,
        }
    }

    pub fn spatial_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.c];
        for cell in self.data.chunks_exact(self.c) {
            for (o, v) in out.iter_mut().zip(cell) {
                *o += v;
            }
        }
        let n = (self.h * self.w) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// One sample's inputs to the head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub f_cls: Vec<f64>,
    pub f_grid_dino: Grid,
    pub f_grid_res: Grid,
}

impl FeatureBundle {
    pub fn validate(&self) -> Result<(), FusionError> {
        check_len("dino grid channels", self.f_cls.len(), self.f_grid_dino.c)?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.f_cls) || !finite(&self.f_grid_dino.data) || !finite(&self.f_grid_res.data) {
            return Err(FusionError::Features("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// `f_cls + spatial_mean(grid)`.
pub fn combine_dino(grid: &Grid, f_cls: &[f64]) -> Result<Vec<f64>, FusionError> {
    check_len("f_cls", grid.c, f_cls.len())?;
    let mut out = grid.spatial_mean();
    for (o, c) in out.iter_mut().zip(f_cls) {
        *o += c;
    }
    Ok(out)
}

fn project(pooled: &[f64], align: &AlignParams) -> Vec<f64> {
    let c_res = pooled.len();
    align
        .bias
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let row = &align.weight[i * c_res..(i + 1) * c_res];
            b + row.iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

/// `W · spatial_mean(grid) + b`.
pub fn align_res(grid: &Grid, align: &AlignParams) -> Result<Vec<f64>, FusionError> {
    check_len("align.weight", align.bias.len() * grid.c, align.weight.len())?;
    Ok(project(&grid.spatial_mean(), align))
}

/// Inverted-dropout scale factors (`0` or `1/(1-p)`) for both hidden layers,
/// laid out `[position][unit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub layer1: Vec<f64>,
    pub layer2: Vec<f64>,
}

impl DropoutMasks {
    pub fn draw(c: usize, hidden: usize, rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        };
        let layer1 = draw(c * hidden);
        let layer2 = draw(c * hidden);
        Self { layer1, layer2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub a_dino: Vec<f64>,
    pub a_res: Vec<f64>,
    pub f_fus: Vec<f64>,
}

/// Intermediate values of the gating network, kept for the backward pass.
#[derive(Debug, Clone, Default)]
struct GateCache {
    z1: Vec<f64>,
    d1: Vec<f64>,
    z2: Vec<f64>,
    d2: Vec<f64>,
}

fn gate_inner(
    f_dino: &[f64],
    f_res: &[f64],
    g: &GatingParams,
    masks: Option<&DropoutMasks>,
) -> (GateOutput, GateCache) {
    let c = f_dino.len();
    let h = g.hidden;
    let mut cache = GateCache {
        z1: vec![0.0; c * h],
        d1: vec![0.0; c * h],
        z2: vec![0.0; c * h],
        d2: vec![0.0; c * h],
    };
    let mut out = GateOutput {
        a_dino: vec![0.0; c],
        a_res: vec![0.0; c],
        f_fus: vec![0.0; c],
    };
    for i in 0..c {
        let x = [f_dino[i], f_res[i]];
        let s = i * h..(i + 1) * h;
        for m in 0..h {
            let z = g.b1[m] + g.w1[2 * m] * x[0] + g.w1[2 * m + 1] * x[1];
            cache.z1[i * h + m] = z;
            let scale = masks.map_or(1.0, |mk| mk.layer1[i * h + m]);
            cache.d1[i * h + m] = z.max(0.0) * scale;
        }
        let d1 = &cache.d1[s.clone()];
        for m in 0..h {
            let row = &g.w2[m * h..(m + 1) * h];
            let z = g.b2[m] + row.iter().zip(d1).map(|(w, v)| w * v).sum::<f64>();
            cache.z2[i * h + m] = z;
            let scale = masks.map_or(1.0, |mk| mk.layer2[i * h + m]);
            cache.d2[i * h + m] = z.max(0.0) * scale;
        }
        let d2 = &cache.d2[s];
        let logit = |j: usize| {
            g.b3[j] + g.w3[j * h..(j + 1) * h].iter().zip(d2).map(|(w, v)| w * v).sum::<f64>()
        };
        let [a0, a1] = softmax2(logit(0), logit(1));
        out.a_dino[i] = a0;
        out.a_res[i] = a1;
        // the clamp only absorbs rounding; it never binds in exact arithmetic
        out.f_fus[i] = (a0 * x[0] + a1 * x[1]).clamp(x[0].min(x[1]), x[0].max(x[1]));
    }
    (out, cache)
}

/// Two-way softmax in logistic form, with `a1 = 1 - a0`.
fn softmax2(l0: f64, l1: f64) -> [f64; 2] {
    let a0 = 1.0 / (1.0 + (l1 - l0).exp());
    [a0, 1.0 - a0]
}

/// Runs the gating network. Dropout applies only when `training` is set, with
/// masks drawn from `seed`.
pub fn gate_forward(
    f_dino: &[f64],
    f_res: &[f64],
    gating: &GatingParams,
    training: bool,
    seed: u64,
) -> Result<GateOutput, FusionError> {
    check_len("f_res", f_dino.len(), f_res.len())?;
    let masks = (training && gating.dropout > 0.0)
        .then(|| DropoutMasks::draw(f_dino.len(), gating.hidden, gating.dropout, seed));
    Ok(gate_inner(f_dino, f_res, gating, masks.as_ref()).0)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `(logits, probs)` of the linear classifier.
pub fn classify(f_fus: &[f64], cls: &ClassifierParams) -> ([f64; 3], [f64; 3]) {
    let mut logits = [cls.bias[0], cls.bias[1], cls.bias[2]];
    for (i, f) in f_fus.iter().enumerate() {
        for k in 0..3 {
            logits[k] += cls.weight[i * 3 + k] * f;
        }
    }
    let p = softmax(&logits);
    (logits, [p[0], p[1], p[2]])
}

pub fn ce_loss(probs: &[f64; 3], truth: usize) -> f64 {
    -probs[truth].max(CE_PROB_FLOOR).ln()
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub f_dino: Vec<f64>,
    pub pooled_res: Vec<f64>,
    pub f_res: Vec<f64>,
    pub gate: GateOutput,
    pub logits: [f64; 3],
    pub probs: [f64; 3],
    cache: GateCache,
}

impl Forward {
    /// Smallest `|pre-activation|` in the gating network.
    pub fn min_abs_preactivation(&self) -> f64 {
        self.cache
            .z1
            .iter()
            .chain(&self.cache.z2)
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

fn check_bundle(b: &FeatureBundle, p: &HeadParams) -> Result<(), FusionError> {
    check_len("f_cls", p.dims.c, b.f_cls.len())?;
    check_len("dino grid channels", p.dims.c, b.f_grid_dino.c)?;
    check_len("res grid channels", p.dims.c_res, b.f_grid_res.c)
}

/// Full forward pass. `masks` enables dropout.
pub fn forward(
    bundle: &FeatureBundle,
    params: &HeadParams,
    masks: Option<&DropoutMasks>,
) -> Result<Forward, FusionError> {
    check_bundle(bundle, params)?;
    let f_dino = combine_dino(&bundle.f_grid_dino, &bundle.f_cls)?;
    let pooled_res = bundle.f_grid_res.spatial_mean();
    let f_res = project(&pooled_res, &params.align);
    let (gate, cache) = gate_inner(&f_dino, &f_res, &params.gating, masks);
    let (logits, probs) = classify(&gate.f_fus, &params.classifier);
    Ok(Forward {
        f_dino,
        pooled_res,
        f_res,
        gate,
        logits,
        probs,
        cache,
    })
}

/// Loss and exact gradients of every parameter for one sample.
pub fn backward(
    bundle: &FeatureBundle,
    truth: usize,
    params: &HeadParams,
    masks: Option<&DropoutMasks>,
) -> Result<(f64, HeadParams), FusionError> {
    let mut grads = params.zeros_like();
    let loss = accumulate_grad(bundle, truth, params, masks, 1.0, &mut grads)?;
    Ok((loss, grads))
}

/// Adds `scale * d loss / d params` into `grads` and returns the loss.
pub(crate) fn accumulate_grad(
    bundle: &FeatureBundle,
    truth: usize,
    params: &HeadParams,
    masks: Option<&DropoutMasks>,
    scale: f64,
    grads: &mut HeadParams,
) -> Result<f64, FusionError> {
    if truth >= 3 {
        return Err(FusionError::BadConfig(format!("truth index {truth} out of range")));
    }
    let fw = forward(bundle, params, masks)?;
    let loss = ce_loss(&fw.probs, truth);
    let c = params.dims.c;
    let c_res = params.dims.c_res;
    let h = params.gating.hidden;
    let g = &params.gating;

    // d loss / d logits; zero where the probability floor is active
    let mut dlogits = [0.0; 3];
    if fw.probs[truth] >= CE_PROB_FLOOR {
        for k in 0..3 {
            dlogits[k] = (fw.probs[k] - if k == truth { 1.0 } else { 0.0 }) * scale;
        }
    }
    for k in 0..3 {
        grads.classifier.bias[k] += dlogits[k];
    }

    let mut df_res = vec![0.0; c];
    let mut dz1 = vec![0.0; h];
    let mut dd1 = vec![0.0; h];
    let mut dz2 = vec![0.0; h];
    for i in 0..c {
        let wrow = &params.classifier.weight[i * 3..i * 3 + 3];
        let f = fw.gate.f_fus[i];
        let mut dfus = 0.0;
        for k in 0..3 {
            grads.classifier.weight[i * 3 + k] += f * dlogits[k];
            dfus += wrow[k] * dlogits[k];
        }
        let x = [fw.f_dino[i], fw.f_res[i]];
        let a = [fw.gate.a_dino[i], fw.gate.a_res[i]];
        let mut dx = [dfus * a[0], dfus * a[1]];
        let da = [dfus * x[0], dfus * x[1]];
        let dot = a[0] * da[0] + a[1] * da[1];
        let dz3 = [a[0] * (da[0] - dot), a[1] * (da[1] - dot)];

        let s = i * h;
        let d2 = &fw.cache.d2[s..s + h];
        for j in 0..2 {
            grads.gating.b3[j] += dz3[j];
            for m in 0..h {
                grads.gating.w3[j * h + m] += dz3[j] * d2[m];
            }
        }
        for m in 0..h {
            let dd2 = dz3[0] * g.w3[m] + dz3[1] * g.w3[h + m];
            let mask = masks.map_or(1.0, |mk| mk.layer2[s + m]);
            dz2[m] = if fw.cache.z2[s + m] > 0.0 { dd2 * mask } else { 0.0 };
        }
        let d1 = &fw.cache.d1[s..s + h];
        dd1.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..h {
            grads.gating.b2[m] += dz2[m];
            for q in 0..h {
                grads.gating.w2[m * h + q] += dz2[m] * d1[q];
                dd1[q] += g.w2[m * h + q] * dz2[m];
            }
        }
        for m in 0..h {
            let mask = masks.map_or(1.0, |mk| mk.layer1[s + m]);
            dz1[m] = if fw.cache.z1[s + m] > 0.0 { dd1[m] * mask } else { 0.0 };
        }
        for m in 0..h {
            grads.gating.b1[m] += dz1[m];
            grads.gating.w1[2 * m] += dz1[m] * x[0];
            grads.gating.w1[2 * m + 1] += dz1[m] * x[1];
            dx[0] += g.w1[2 * m] * dz1[m];
            dx[1] += g.w1[2 * m + 1] * dz1[m];
        }
        df_res[i] = dx[1];
    }

    for (i, d) in df_res.iter().enumerate() {
        grads.align.bias[i] += d;
        let row = &mut grads.align.weight[i * c_res..(i + 1) * c_res];
        for (w, x) in row.iter_mut().zip(&fw.pooled_res) {
            *w += d * x;
        }
    }
    Ok(loss)
}
