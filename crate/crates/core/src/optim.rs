//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MimError, Result};
use crate::network::{decays, ParameterSet};
use crate::tensor::Tensor;

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then half-cosine
/// annealing to 0 at `steps`.
pub fn cosine_lr(step: usize, steps: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = steps.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, and the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect()
        };
        OptimizerState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update of a single tensor; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..theta.len() {
        let g = grad[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let th = theta[i] as f64;
        theta[i] = (th - lr * wd * th - lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
    }
}

/// Applies one step to every parameter. Fails without modifying anything if
/// any gradient is missing or non-finite.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| MimError::NonFiniteGradient(format!("{name} (missing)")))?;
        if g.shape() != p.shape() {
            return Err(MimError::shape("adamw", format!("gradient shape for {name}")));
        }
        if !g.all_finite() {
            return Err(MimError::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let mut theta = params.get(&name).expect("listed").to_vec();
        let shape = params.get(&name).expect("listed").shape().to_vec();
        let mut m = state.m[&name].to_vec();
        let mut v = state.v[&name].to_vec();
        adamw_update(
            &mut theta,
            grads[&name].data(),
            &mut m,
            &mut v,
            state.t,
            lr,
            cfg,
            decays(&name),
        );
        params.set(&name, Tensor::new(shape.clone(), theta)?)?;
        state.m.insert(name.clone(), Tensor::new(shape.clone(), m)?);
        state.v.insert(name, Tensor::new(shape, v)?);
    }
    Ok(())
}
