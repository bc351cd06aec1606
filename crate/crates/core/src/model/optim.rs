use serde::{Deserialize, Serialize};

use super::{AcousticModel, Gradients, ModelError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(5.0) }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl OptimizerState {
    pub fn new(model: &AcousticModel, config: AdamConfig) -> Self {
        Self { config, step: 0, m: Gradients::zeros_like(model), v: Gradients::zeros_like(model) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Bias-corrected Adam update, applied in place after optional global-norm
/// clipping. Non-finite gradients abort the step without touching anything.
pub fn adam_step(model: &mut AcousticModel, state: &mut OptimizerState, grads: &Gradients) -> Result<StepStats, ModelError> {
    if grads.tensors.len() != model.params.len()
        || grads.tensors.iter().zip(&model.params).any(|(g, p)| g.len() != p.data.len())
        || state.m.tensors.len() != grads.tensors.len()
    {
        return Err(ModelError::ShapeMismatch("gradients do not match parameters".into()));
    }
    let bad = grads.tensors.iter().zip(&model.params).find_map(|(g, p)| g.iter().any(|x| !x.is_finite()).then_some(p));
    if let Some(p) = bad {
        return Err(ModelError::NonFiniteGradient(p.name.clone()));
    }
    let norm = grads.global_norm();
    let scale = match state.config.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let cfg = &state.config;
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (pi, p) in model.params_mut().iter_mut().enumerate() {
        let g = &grads.tensors[pi];
        let m = &mut state.m.tensors[pi];
        let v = &mut state.v.tensors[pi];
        for k in 0..p.data.len() {
            let gk = g[k] * scale;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p.data[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(StepStats { grad_norm: norm, clipped: scale < 1.0 })
}
