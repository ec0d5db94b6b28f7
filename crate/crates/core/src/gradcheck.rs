//! Central finite-difference check of the analytic BCE gradients.

use serde::Serialize;

use crate::data::{AffordanceTarget, TargetKind};
use crate::error::Result;
use crate::features::{synth_text_tokens, FeatureStack, UMD_AFFORDANCES};
use crate::model::{Ablation, Model, ModelDims};
use crate::rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const PASS_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < PASS_THRESHOLD
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares every entry of every trainable tensor with
/// `(L(θ+h) − L(θ−h)) / 2h`.
pub fn check_model(model: &Model, stack: &FeatureStack, target: &AffordanceTarget, step: f64) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grad(stack, target)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .params
        .tensors()
        .into_iter()
        .map(|(n, _, _, v)| (n, v.to_vec()))
        .collect();
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    let mut n_checked = 0;
    for (ti, (name, an)) in analytic.iter().enumerate() {
        let mut worst = (0.0f64, 0usize);
        for (idx, &a) in an.iter().enumerate() {
            let orig = model.params.tensors()[ti].3[idx];
            probe.params.tensors_mut()[ti].1[idx] = orig + step;
            let plus = probe.loss(stack, target)?;
            probe.params.tensors_mut()[ti].1[idx] = orig - step;
            let minus = probe.loss(stack, target)?;
            probe.params.tensors_mut()[ti].1[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_error(a, numeric);
            if e > worst.0 {
                worst = (e, idx);
            }
            n_checked += 1;
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            len: an.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        n_checked,
    })
}

/// Small random problem: 3 classes, a 2×2 patch grid, `C = 8`, `C_v = 12`,
/// `p = 2`, `j = 2`, `t = 2`, three encoder layers, 5×5 output.
pub fn fixture(seed: u64) -> Result<(Model, FeatureStack, AffordanceTarget)> {
    let dims = ModelDims {
        p: 2,
        j: 2,
        t: 2,
        c: 8,
        c_t: 6,
        c_v: 12,
        n_classes: 3,
    };
    let names: Vec<String> = UMD_AFFORDANCES[..3].iter().map(|s| s.to_string()).collect();
    let table = synth_text_tokens(&names, dims.c_t, seed)?;
    let model = Model::new(dims, Ablation::none(), table, seed)?;
    let mut r = rng::stream(seed, "gradcheck/features");
    let layers = (0..3).map(|_| rng::gaussian_mat(&mut r, 4, dims.c_v, 1.0)).collect();
    let cls = rng::gaussian_vec(&mut r, dims.c_v, 1.0);
    let stack = FeatureStack::new(layers, cls, (2, 2), (5, 5))?;
    let values = rng::gaussian_vec(&mut rng::stream(seed, "gradcheck/target"), 25 * 3, 1.0)
        .into_iter()
        .map(|v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let target = AffordanceTarget::new(5, 5, 3, values, TargetKind::DenseBinary)?;
    Ok((model, stack, target))
}

pub fn run(seed: u64) -> Result<GradCheckReport> {
    let (model, stack, target) = fixture(seed)?;
    check_model(&model, &stack, &target, FD_STEP)
}
