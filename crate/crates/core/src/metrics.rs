//! Per-step instrumentation: the metric record written at every log
//! interval, rms helpers, and windowed averaging over the tail of a run.

use crate::model::AttentionProbe;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("window of {window} steps exceeds the {covered} steps recorded")]
    WindowTooLong { window: u64, covered: u64 },
    #[error("unknown metric {0}")]
    UnknownMetric(String),
    #[error("metric {0} has no recorded values")]
    NoValues(String),
}

/// Root mean square of a slice.
pub fn rms<T: Scalar>(xs: &[T]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let sum: f64 = xs.iter().map(|&v| v.to_f64() * v.to_f64()).sum();
    (sum / xs.len() as f64).sqrt()
}

/// Per-tracked-parameter statistics for one step; the defaults track the
/// first mlp layer of every block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackedStats {
    pub grad_rms: f64,
    /// rms of the unscaled optimizer update Δ, before lr and decay.
    pub update_rms: f64,
    pub param_rms: f64,
}

/// One training step's instrumentation snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub lr_effective: f64,
    pub z_loss_value: f64,
    pub log_z_mean: f64,
    pub grad_global_norm: f64,
    pub attention: Vec<AttentionProbe>,
    /// Indexed by block; tracks each block's first mlp layer.
    pub tracked: Vec<TrackedStats>,
    pub block_output_rms: Vec<f64>,
    pub diverged: bool,
}

impl MetricRecord {
    /// Named scalar lookup used by the csv writer and window summaries.
    /// Attention and per-block names carry the layer index suffix, e.g.
    /// `max_attn_logit_l0` or `grad_rms_b2`.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "step" => return Some(self.step as f64),
            "train_loss" => return Some(self.train_loss),
            "eval_loss" => return self.eval_loss,
            "lr_effective" => return Some(self.lr_effective),
            "z_loss_value" => return Some(self.z_loss_value),
            "log_z_mean" => return Some(self.log_z_mean),
            "abs_log_z_mean" => return Some(self.log_z_mean.abs()),
            "grad_global_norm" => return Some(self.grad_global_norm),
            _ => {}
        }
        if let Some((kind, idx)) = split_indexed(name, "_l") {
            let p = self.attention.iter().find(|p| p.layer == idx)?;
            return match kind {
                "max_attn_logit" => Some(p.max_logit),
                "q_rms" => Some(p.q_rms),
                "k_rms" => Some(p.k_rms),
                "cos_at_max" => Some(p.cos_sim_at_max),
                "cos_mean" => Some(p.cos_sim_mean),
                _ => None,
            };
        }
        if let Some((kind, idx)) = split_indexed(name, "_b") {
            return match kind {
                "grad_rms" => self.tracked.get(idx).map(|t| t.grad_rms),
                "update_rms" => self.tracked.get(idx).map(|t| t.update_rms),
                "param_rms" => self.tracked.get(idx).map(|t| t.param_rms),
                "block_out_rms" => self.block_output_rms.get(idx).copied(),
                _ => None,
            };
        }
        None
    }
}

fn split_indexed<'a>(name: &'a str, sep: &str) -> Option<(&'a str, usize)> {
    let pos = name.rfind(sep)?;
    let idx: usize = name[pos + sep.len()..].parse().ok()?;
    Some((&name[..pos], idx))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowSummary {
    pub metric: String,
    pub window_steps: u64,
    pub mean: f64,
}

/// Desk default window: 500 steps, shrunk to an eighth of short runs.
pub fn default_window(total_steps: u64) -> u64 {
    500.min((total_steps / 8).max(1))
}

/// Mean of a metric over the records falling in the final `window` steps.
pub fn window_mean(records: &[MetricRecord], metric: &str, window: u64) -> Result<WindowSummary, MetricsError> {
    let last = records.last().map(|r| r.step).unwrap_or(0);
    let first = records.first().map(|r| r.step).unwrap_or(0);
    let covered = last.saturating_sub(first) + 1;
    if window > covered {
        return Err(MetricsError::WindowTooLong { window, covered });
    }
    let cutoff = last.saturating_sub(window - 1);
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.step >= cutoff)
        .filter_map(|r| r.metric(metric))
        .collect();
    if values.is_empty() {
        return Err(MetricsError::NoValues(metric.to_string()));
    }
    Ok(WindowSummary {
        metric: metric.to_string(),
        window_steps: window,
        mean: values.iter().sum::<f64>() / values.len() as f64,
    })
}
