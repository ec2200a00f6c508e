use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::{MtpError, Result};

/// Hyperparameters of decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers plus step counter for AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<f32>>,
    pub second_moment: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }
}

/// One AdamW update. `lr_for` gives the learning rate of each parameter
/// (per-group rates); parameters that are frozen or have no gradient are
/// left untouched.
///
/// Update, for a trainable `p` with gradient `g` at step `t`:
/// `p -= lr * wd * p`, then `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut OptimizerState,
    lr_for: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.numel() != g.len() {
            return Err(MtpError::shape(
                "adamw_step",
                format!("{name}: param {} vs grad {}", p.numel(), g.len()),
            ));
        }
        if let Some(m) = state.first_moment.get(name) {
            if m.len() != g.len() {
                return Err(MtpError::shape("adamw_step", format!("{name}: moment buffer")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let AdamWConfig {
        weight_decay,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if !p.requires_grad {
            continue;
        }
        let lr = lr_for(name);
        if !(lr >= 0.0) {
            return Err(MtpError::OutOfRange {
                what: "learning rate",
                detail: format!("{lr} for {name}"),
            });
        }
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi as f64;
            let m_new = beta1 * *mi as f64 + (1.0 - beta1) * gi;
            let v_new = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let mut x = *w as f64;
            x -= lr * weight_decay * x;
            x -= lr * m_hat / (v_hat.sqrt() + eps);
            *w = x as f32;
        }
    }
    Ok(())
}

/// Cosine annealing from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(MtpError::OutOfRange {
            what: "schedule step",
            detail: format!("{step} > {total_steps}"),
        });
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let frac = step as f64 / total_steps as f64;
    let lr = base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    Ok(lr.max(0.0))
}
