use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bindnet::{BatchGrads, PairKey, ProjectorDims, ProjectorParams, TemperatureSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `0.5 lr0 (1 + cos(pi step / total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (PI * t).cos())
}

/// Moments for one scalar trained in isolation (a log temperature).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScalarMoments {
    pub step: u64,
    pub m1: f64,
    pub m2: f64,
}

/// AdamW state for one projector and the temperatures it owns.
///
/// Temperatures only move on steps whose batch involved them, each with its
/// own step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m1: ProjectorParams,
    pub m2: ProjectorParams,
    pub tau: BTreeMap<PairKey, ScalarMoments>,
}

impl OptimizerState {
    pub fn new(dims: ProjectorDims) -> Self {
        Self {
            step: 0,
            m1: ProjectorParams::zeros(dims),
            m2: ProjectorParams::zeros(dims),
            tau: BTreeMap::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m1.is_finite()
            && self.m2.is_finite()
            && self.tau.values().all(|m| m.m1.is_finite() && m.m2.is_finite())
    }
}

/// One AdamW update over a flat slice. `decay` turns on decoupled weight decay.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m1: &mut [f64],
    m2: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m1.iter_mut()).zip(m2.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        if decay {
            *p *= shrink;
        }
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
    }
}

fn slices(p: &mut ProjectorParams) -> [&mut [f64]; 4] {
    [
        p.w1.as_slice_mut().expect("contiguous"),
        p.b1.as_slice_mut().expect("contiguous"),
        p.w2.as_slice_mut().expect("contiguous"),
        p.b2.as_slice_mut().expect("contiguous"),
    ]
}

/// Applies one step to a projector and the temperatures named in `grads`.
pub fn adamw_step(
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    params: &mut ProjectorParams,
    temps: &mut TemperatureSet,
    grads: &BatchGrads,
    lr: f64,
) -> Result<()> {
    if !grads.projector.is_finite() || grads.log_tau.values().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    if grads.projector.dims() != params.dims() {
        return Err(Error::DimMismatch {
            expected: params.param_count(),
            got: grads.projector.param_count(),
        });
    }
    for &(p, f) in grads.log_tau.keys() {
        temps.log_tau(p, f)?;
    }
    state.step += 1;
    let g = &grads.projector;
    let grad_slices = [
        g.w1.as_slice().expect("contiguous"),
        g.b1.as_slice().expect("contiguous"),
        g.w2.as_slice().expect("contiguous"),
        g.b2.as_slice().expect("contiguous"),
    ];
    let decay = [true, false, true, false];
    for (i, ((p, m1), m2)) in slices(params)
        .into_iter()
        .zip(slices(&mut state.m1))
        .zip(slices(&mut state.m2))
        .enumerate()
    {
        adamw_update(p, grad_slices[i], m1, m2, state.step, lr, cfg, decay[i]);
    }
    for (&(p, f), &g) in &grads.log_tau {
        let mom = state.tau.entry((p, f)).or_default();
        mom.step += 1;
        let mut v = [temps.log_tau(p, f)?];
        let (mut a, mut b) = ([mom.m1], [mom.m2]);
        adamw_update(&mut v, &[g], &mut a, &mut b, mom.step, lr, cfg, false);
        mom.m1 = a[0];
        mom.m2 = b[0];
        temps.set_log_tau(p, f, v[0])?;
    }
    Ok(())
}
