use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::model::{backward, ce_loss, forward, DropoutMasks, FeatureBundle, Grid};
use super::params::{HeadDims, HeadParams};
use super::FusionError;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not blow up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-6;
/// Configurations whose gating pre-activations come closer than this to a
/// ReLU kink are redrawn; the finite difference would straddle the kink.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub configs: usize,
    pub params_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    fn merge(&mut self, other: GradCheckReport) {
        self.configs += other.configs;
        self.params_checked += other.params_checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst_param = other.worst_param;
        }
    }
}

fn loss_at(
    bundle: &FeatureBundle,
    truth: usize,
    params: &HeadParams,
    masks: Option<&DropoutMasks>,
) -> Result<f64, FusionError> {
    Ok(ce_loss(&forward(bundle, params, masks)?.probs, truth))
}

/// Compares the analytic gradient of every parameter with a central
/// difference.
pub fn grad_check(
    bundle: &FeatureBundle,
    truth: usize,
    params: &HeadParams,
    masks: Option<&DropoutMasks>,
) -> Result<GradCheckReport, FusionError> {
    let (_, grads) = backward(bundle, truth, params, masks)?;
    let mut report = GradCheckReport {
        configs: 1,
        params_checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    let mut probe = params.clone();
    for (t, name) in HeadParams::tensor_names().into_iter().enumerate() {
        for i in 0..params.tensors()[t].len() {
            let orig = params.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + FD_STEP;
            let up = loss_at(bundle, truth, &probe, masks)?;
            probe.tensors_mut()[t][i] = orig - FD_STEP;
            let down = loss_at(bundle, truth, &probe, masks)?;
            probe.tensors_mut()[t][i] = orig;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.tensors()[t][i];
            let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            report.params_checked += 1;
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Runs [`grad_check`] on `configs` random small heads. Half of them have
/// dropout active with a fixed mask.
pub fn grad_check_random(configs: usize, seed: u64) -> Result<GradCheckReport, FusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheckReport {
        configs: 0,
        params_checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    let mut done = 0;
    while done < configs {
        let dims = HeadDims {
            c: rng.random_range(1..=5),
            c_res: rng.random_range(1..=4),
            hidden: rng.random_range(1..=4),
        };
        let dropout = if done % 2 == 1 { 0.3 } else { 0.0 };
        let mut params = HeadParams::init(dims, dropout, rng.random())?;
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        let (gh, gw) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let bundle = FeatureBundle {
            f_cls: normal_vec(&mut rng, dims.c),
            f_grid_dino: Grid::new(gh, gw, dims.c, normal_vec(&mut rng, gh * gw * dims.c))?,
            f_grid_res: Grid::new(gh, gw, dims.c_res, normal_vec(&mut rng, gh * gw * dims.c_res))?,
        };
        let truth = rng.random_range(0..3);
        let masks = (dropout > 0.0).then(|| DropoutMasks::draw(dims.c, dims.hidden, dropout, rng.random()));
        let fw = forward(&bundle, &params, masks.as_ref())?;
        if fw.min_abs_preactivation() < KINK_MARGIN || fw.probs[truth] < 1e-6 {
            continue;
        }
        total.merge(grad_check(&bundle, truth, &params, masks.as_ref())?);
        done += 1;
    }
    Ok(total)
}
