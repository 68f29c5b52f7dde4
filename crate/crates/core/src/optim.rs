//! AdamW with decoupled weight decay and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> Self {
        OptimState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update. `lr_scale` holds an optional per-parameter multiplier
/// on the learning rate (decay is scaled with it).
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
    hp: &AdamW,
    lr_scale: Option<&[f64]>,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    if let Some(s) = lr_scale {
        if s.len() != params.len() {
            return Err(Error::shape("adamw", "lr multiplier length"));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    let (m_all, v_all) = (state.m.values_mut(), state.v.values_mut());
    for (idx, (p, g)) in params.values_mut().iter_mut().zip(grads.values()).enumerate() {
        let lr_p = lr * lr_scale.map_or(1.0, |s| s[idx]);
        let m = m_all[idx].as_mut_slice();
        let v = v_all[idx].as_mut_slice();
        for (((pv, &gv), mv), vv) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
            *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * gv;
            *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr_p * weight_decay * *pv;
            *pv -= lr_p * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    if !params.all_finite() {
        return Err(Error::Numeric {
            stage: "optimizer step".into(),
            iteration: Some(state.step as usize),
        });
    }
    Ok(())
}

/// `lr0 (1 + cos(pi step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    /// Multiply by `step_gamma` every `step_every` epochs.
    Step,
}

/// Step decay: `lr0 * gamma^(epoch / every)`.
pub fn step_lr(epoch: usize, every: usize, gamma: f64, lr0: f64) -> f64 {
    if every == 0 {
        return lr0;
    }
    lr0 * gamma.powi((epoch / every) as i32)
}
