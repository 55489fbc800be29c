//! Adam with bias correction, global-norm clipping and the warmup/decay
//! learning-rate schedule.

use cpdae_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::model::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::contract(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let mut m = ParamSet::default();
        for (name, t) in params.iter() {
            m.insert(name, Tensor::zeros(t.shape().to_vec()));
        }
        AdamState {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// Linear warmup from 0 to `peak` over the first `warmup_fraction` of the
/// run, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("learning-rate schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::contract(format!("step {step} is past the end of a {total_steps}-step schedule")));
    }
    let warmup = (warmup_fraction * total_steps as f64).round() as usize;
    Ok(if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}

/// Global L2 norm of all gradients, accumulated in `f64` in parameter order.
pub fn global_norm(grads: &ParamSet<f32>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet<f32>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// One bias-corrected Adam update.
///
/// Every parameter must have a gradient of the same shape; a non-finite
/// gradient aborts before anything is modified.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::contract(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient in `{name}`")));
        }
    }
    if lr < 0.0 {
        return Err(Error::contract(format!("negative learning rate {lr}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("optimizer state lacks `{name}`")))?
            .data_mut();
        for (mi, &gi) in m.iter_mut().zip(g.data()) {
            *mi = (b1 * *mi as f64 + (1.0 - b1) * gi as f64) as f32;
        }
        let m = state.m.get(name).expect("present").data();
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("optimizer state lacks `{name}`")))?
            .data_mut();
        for (((pi, vi), &gi), &mi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()).zip(m) {
            let gi = gi as f64;
            *vi = (b2 * *vi as f64 + (1.0 - b2) * gi * gi) as f32;
            let m_hat = mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            *pi = (*pi as f64 - lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}
