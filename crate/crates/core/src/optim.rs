//! AdamW with independent or coupled weight decay, the warmup + cosine
//! schedule, global-norm gradient clipping, and the per-parameter learning
//! rate scalings (muP fan-in ratio, parameter-rms).

use crate::model::{Param, ParamKind, Parameters};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradients at step {step}")]
    NonFiniteGradients { step: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// θ ← θ − s_t·η·Δ − s_t·λ·θ: decay sees the schedule but not the lr.
    #[default]
    Independent,
    /// θ ← θ − s_t·η·(Δ + λ·θ): the framework-default coupling.
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrScaling {
    #[default]
    None,
    /// Multiply lr for linear layers (head included) by base_fan_in/fan_in.
    Mup,
    /// Multiply lr for every parameter by max(rms(p), 1e-3).
    RmsScaled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    /// Global L2 norm ceiling; `None` disables clipping.
    pub clip_global_norm: Option<f64>,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub zloss_coeff: f64,
    pub lr_scaling: LrScaling,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_mode: DecayMode::Independent,
            clip_global_norm: Some(1.0),
            max_lr: 1e-2,
            min_lr: 1e-5,
            warmup_steps: 200,
            total_steps: 4000,
            zloss_coeff: 1e-4,
            lr_scaling: LrScaling::None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(OptimError::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(OptimError::InvalidConfig("eps must be positive".into()));
        }
        // total_steps of 0 is a valid evaluate-only run.
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(OptimError::InvalidConfig(format!(
                "warmup {} must be shorter than total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.max_lr <= 0.0 || self.min_lr < 0.0 {
            return Err(OptimError::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Schedule multiplier s_t in [0, 1]: linear warmup to 1 at `warmup_steps`,
/// then cosine decay landing on min_lr/max_lr at `total_steps`.
pub fn schedule(t: u64, cfg: &OptimizerConfig) -> f64 {
    if t < cfg.warmup_steps {
        return t as f64 / cfg.warmup_steps as f64;
    }
    let progress = (t - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = progress.min(1.0);
    let lr = cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos());
    lr / cfg.max_lr
}

/// z-loss value for a slice of row log-partitions: coeff · mean(log²Z).
pub fn zloss_from_logz<T: Scalar>(logz: &[T], coeff: f64) -> f64 {
    if logz.is_empty() {
        return 0.0;
    }
    let mean_sq = logz.iter().map(|&z| z.to_f64().powi(2)).sum::<f64>() / logz.len() as f64;
    coeff * mean_sq
}

/// Global L2 norm over a gradient set.
pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by max_norm/norm when the global norm exceeds the
/// ceiling; direction is preserved exactly.
pub fn clip_gradients<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// First/second moment EMAs mirroring the parameter shapes, plus the step
/// counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    pub v: Vec<Vec<T>>,
    pub u: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        let v = params.iter().map(|p| vec![T::ZERO; p.tensor.len()]).collect();
        let u = params.iter().map(|p| vec![T::ZERO; p.tensor.len()]).collect();
        Self { v, u, t: 0 }
    }
}

/// Per-parameter learning rate multiplier for the configured scaling.
///
/// `model_width` is the current model dimension. Linear fan-ins here are all
/// proportional to the width (d for projections, 4d for the second MLP
/// layer), so the base model's fan-in for the same role is
/// `fan_in · base / width` and the muP ratio base-fan-in/fan-in reduces to
/// `base_fan_in / model_width` for every linear layer.
pub fn lr_multiplier<T: Scalar>(
    cfg: &OptimizerConfig,
    base_fan_in: usize,
    model_width: usize,
    param: &Param<T>,
) -> f64 {
    match cfg.lr_scaling {
        LrScaling::None => 1.0,
        LrScaling::Mup => match param.kind {
            ParamKind::Linear | ParamKind::Head => base_fan_in as f64 / model_width as f64,
            ParamKind::Embedding | ParamKind::Norm => 1.0,
        },
        LrScaling::RmsScaled => {
            let data = param.tensor.data();
            let rms = (data.iter().map(|&v| v.to_f64().powi(2)).sum::<f64>() / data.len().max(1) as f64).sqrt();
            rms.max(1e-3)
        }
    }
}

/// Result of one optimizer step: the unscaled update Δ = v̂/(√û+ε) statistics
/// per parameter, for instrumentation.
pub struct StepStats {
    pub update_rms: Vec<f64>,
}

/// One AdamW step over all parameters. `grads` must already be clipped.
///
/// EMAs update first, then the bias-corrected unscaled update
/// Δ = v̂/(√û + ε) is applied under the configured decay mode and per-
/// parameter lr multiplier. Returns per-parameter rms of Δ.
pub fn adamw_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    cfg: &OptimizerConfig,
    base_fan_in: usize,
    model_width: usize,
    schedule_t: f64,
) -> Result<StepStats, OptimError> {
    state.t += 1;
    let t = state.t;
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(OptimError::NonFiniteGradients { step: t });
    }
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_m_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = T::from_f64(1.0 - cfg.beta2);
    let bc1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(t as i32)));
    let bc2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(t as i32)));
    let eps = T::from_f64(cfg.eps);
    let s = T::from_f64(schedule_t);
    let lambda = T::from_f64(cfg.weight_decay);

    let mut update_rms = Vec::with_capacity(params.len());
    for (idx, grad) in grads.iter().enumerate() {
        let mult = lr_multiplier(cfg, base_fan_in, model_width, params.get(idx));
        let eta = T::from_f64(cfg.max_lr * mult);
        let param = params.get_mut(idx);
        let data = param.tensor.data_mut();
        let v = &mut state.v[idx];
        let u = &mut state.u[idx];
        let mut sq_sum = 0.0f64;
        for i in 0..data.len() {
            let g = grad[i];
            v[i] = b1 * v[i] + one_m_b1 * g;
            u[i] = b2 * u[i] + one_m_b2 * g * g;
            let v_hat = v[i] * bc1;
            let u_hat = u[i] * bc2;
            let delta = v_hat / (u_hat.sqrt() + eps);
            sq_sum += delta.to_f64() * delta.to_f64();
            match cfg.decay_mode {
                DecayMode::Independent => {
                    data[i] = data[i] - s * eta * delta - s * lambda * data[i];
                }
                DecayMode::Coupled => {
                    data[i] = data[i] - s * eta * (delta + lambda * data[i]);
                }
            }
        }
        update_rms.push((sq_sum / data.len().max(1) as f64).sqrt());
    }
    Ok(StepStats { update_rms })
}
