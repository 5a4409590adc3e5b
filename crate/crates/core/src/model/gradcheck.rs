//! Central finite-difference check of the analytic gradient.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{HeadLoss, LossConfig, TrunkConfig, TrunkVariant};
use super::loss::loss;
use super::net::{backward, forward, init_params, ModelState};
use crate::error::Result;
use crate::rng;

pub const STEP: f64 = 1e-5;
/// Denominator floor so gradients that are zero up to rounding do not blow
/// up the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub variant: TrunkVariant,
    pub residual: bool,
    pub head_loss: HeadLoss,
    pub n_params: usize,
    pub checked: usize,
    /// Parameters whose ±step perturbation changed a ReLU activation pattern.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: String,
}

/// A model small enough to check every parameter (a few hundred weights).
pub fn tiny_config(variant: TrunkVariant, residual: bool) -> TrunkConfig {
    let mut c = TrunkConfig::default_for(variant);
    match variant {
        TrunkVariant::Mlp => {
            c.depth = 2;
            c.width = 8;
            c.resolution = 4;
        }
        TrunkVariant::Conv => {
            c.depth = 2;
            c.width = 6;
            c.resolution = 4;
            c.residual = residual;
        }
        TrunkVariant::VitMicro => {
            c.depth = 1;
            c.width = 8;
            c.resolution = 8;
            c.vit.patch_size = 4;
            c.vit.embed_dim = 8;
            c.vit.heads = 2;
            c.vit.key_dim = 4;
        }
    }
    c
}

fn total_loss(
    state: &ModelState,
    inputs: &[Array3<f64>],
    tm: &Array2<f64>,
    ta: &Array2<f64>,
    lc: &LossConfig,
) -> Result<(f64, Vec<bool>)> {
    let c = forward(state, inputs.iter().map(|x| x.view()))?;
    let l = loss(c.main.view(), c.aux.view(), tm.view(), ta.view(), lc)?;
    Ok((l.total, c.relu_signature()))
}

/// Compare analytic and numeric gradients on every parameter of `state`
/// for a random batch.
pub fn check_state(
    state: &ModelState,
    lc: &LossConfig,
    batch: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut r = rng::named(seed, "gradient-check");
    let side = state.config.resolution;
    let inputs: Vec<Array3<f64>> = (0..batch)
        .map(|_| Array3::from_shape_fn((3, side, side), |_| r.random::<f64>() * 2.0 - 1.0))
        .collect();
    let tm = Array2::from_shape_fn((batch, state.k_main), |_| r.random::<f64>() * 2.0 - 1.0);
    let ta = Array2::from_shape_fn((batch, state.k_aux), |_| r.random::<f64>() * 2.0 - 1.0);

    let cache = forward(state, inputs.iter().map(|x| x.view()))?;
    let base_sig = cache.relu_signature();
    let analytic = backward(state, &cache, tm.view(), ta.view(), lc)?;

    let mut work = state.clone();
    let mut report = GradCheckReport {
        variant: state.config.variant,
        residual: state.config.residual,
        head_loss: lc.head_loss,
        n_params: state.n_params(),
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: String::new(),
    };
    for i in 0..state.n_params() {
        let p0 = work.params[i];
        work.params[i] = p0 + STEP;
        let (lp, sp) = total_loss(&work, &inputs, &tm, &ta, lc)?;
        work.params[i] = p0 - STEP;
        let (lm, sm) = total_loss(&work, &inputs, &tm, &ta, lc)?;
        work.params[i] = p0;
        if sp != base_sig || sm != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * STEP);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = state
                .layout
                .segments
                .iter()
                .find(|s| s.range().contains(&i))
                .map(|s| format!("{}[{}]", s.name, i - s.offset))
                .unwrap_or_default();
        }
    }
    Ok(report)
}

/// Build a tiny model of the given shape with small non-zero biases (so bias
/// paths are exercised away from zero) and check it.
pub fn gradient_check(
    cfg: &TrunkConfig,
    k_main: usize,
    k_aux: usize,
    lc: &LossConfig,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut state = init_params(cfg, k_main, k_aux, seed)?;
    let mut r = rng::named(seed, "gradient-check-bias");
    let biases: Vec<_> = state
        .layout
        .segments
        .iter()
        .filter(|s| s.bias)
        .map(|s| s.range())
        .collect();
    for range in biases {
        for v in &mut state.params[range] {
            *v = r.random::<f64>() * 0.2 - 0.1;
        }
    }
    check_state(&state, lc, 3, seed)
}
