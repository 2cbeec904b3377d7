//! Learning-rate sweeps, lr-sensitivity, quadratic scaling-trend fits, and
//! divergence prediction across model scales.

use crate::metrics::{default_window, window_mean, WindowSummary};
use crate::model::ModelConfig;
use crate::parallel::par_map;
use crate::scalar::Scalar;
use crate::train::{train, TrainError, TrainSetup};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// The seven-point grid spanning three orders of magnitude.
pub const LR_GRID: [f64; 7] = [3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1];
/// Alternate grid shifted down, used alongside the standard one when
/// independent decay is off.
pub const LR_GRID_LOW: [f64; 7] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

pub const DIVERGENCE_THRESHOLD: f64 = 1e4;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("empty learning-rate grid")]
    EmptyGrid,
    #[error("grid points missing from results: {0:?}")]
    MissingPoints(Vec<f64>),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least 3 points for a quadratic fit, got {0}")]
    TooFewPoints(usize),
    #[error("rank-deficient system: duplicated scales with conflicting values")]
    RankDeficient,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub final_eval_loss: f64,
    pub diverged: bool,
    pub window_summaries: BTreeMap<String, WindowSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<GridPoint>,
    pub best_loss: f64,
    pub lr_sensitivity: f64,
}

/// Expected deviation from the best loss over a learning-rate grid:
/// mean over the grid of (loss − min loss). Diverged runs enter with their
/// capped loss. Errors list any expected grid point that has no result.
pub fn lr_sensitivity(results: &[(f64, f64)], expected_grid: &[f64]) -> Result<f64, SweepError> {
    if expected_grid.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    let mut losses = Vec::with_capacity(expected_grid.len());
    let mut missing = Vec::new();
    for &lr in expected_grid {
        match results.iter().find(|(r_lr, _)| relative_eq(*r_lr, lr)) {
            Some((_, loss)) => losses.push(*loss),
            None => missing.push(lr),
        }
    }
    if !missing.is_empty() {
        return Err(SweepError::MissingPoints(missing));
    }
    let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(losses.iter().map(|l| l - best).sum::<f64>() / losses.len() as f64)
}

fn relative_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Metrics summarized into each grid point's window means.
const SUMMARY_METRICS: &[&str] = &["train_loss", "log_z_mean", "abs_log_z_mean", "max_attn_logit_l0"];

/// Runs one training job per grid learning rate (up to `jobs` concurrently)
/// and assembles the sensitivity summary. Results are deterministic and
/// independent of the execution order.
pub fn run_sweep<T: Scalar>(base: &TrainSetup, grid: &[f64], jobs: usize) -> Result<SweepResult, SweepError> {
    if grid.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    let setups: Vec<TrainSetup> = grid
        .iter()
        .map(|&lr| {
            let mut s = base.clone();
            s.optimizer.max_lr = lr;
            s
        })
        .collect();
    let outcomes = par_map(setups, jobs, |setup| {
        let outcome = train::<T>(&setup)?;
        let window = default_window(setup.optimizer.total_steps);
        let mut summaries = BTreeMap::new();
        for metric in SUMMARY_METRICS {
            if let Ok(w) = window_mean(&outcome.records, metric, window) {
                summaries.insert(metric.to_string(), w);
            }
        }
        Ok::<_, TrainError>((setup.optimizer.max_lr, outcome, summaries))
    });
    let mut points = Vec::with_capacity(grid.len());
    for res in outcomes {
        let (lr, outcome, window_summaries) = res?;
        points.push(GridPoint {
            lr,
            final_eval_loss: outcome.final_eval_loss,
            diverged: outcome.diverged,
            window_summaries,
        });
    }
    let losses: Vec<(f64, f64)> = points.iter().map(|p| (p.lr, p.final_eval_loss)).collect();
    let sensitivity = lr_sensitivity(&losses, grid)?;
    let best_loss = points.iter().map(|p| p.final_eval_loss).fold(f64::INFINITY, f64::min);
    Ok(SweepResult { grid: points, best_loss, lr_sensitivity: sensitivity })
}

/// Sweeps the union of the standard and shifted grids and reports the
/// minimum sensitivity over the two ranges, the convention for runs without
/// independent decay.
pub fn run_sweep_dual_range<T: Scalar>(base: &TrainSetup, jobs: usize) -> Result<SweepResult, SweepError> {
    let mut union: Vec<f64> = LR_GRID_LOW.to_vec();
    for &lr in LR_GRID.iter() {
        if !union.iter().any(|&u| relative_eq(u, lr)) {
            union.push(lr);
        }
    }
    let result = run_sweep::<T>(base, &union, jobs)?;
    let losses: Vec<(f64, f64)> = result.grid.iter().map(|p| (p.lr, p.final_eval_loss)).collect();
    let sens_high = lr_sensitivity(&losses, &LR_GRID)?;
    let sens_low = lr_sensitivity(&losses, &LR_GRID_LOW)?;
    Ok(SweepResult { lr_sensitivity: sens_high.min(sens_low), ..result })
}

/// Quadratic fit y = a·s² + b·s + c in (log10 scale, log10 value) space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingFit {
    /// (s, y) points the fit was computed from.
    pub points: Vec<(f64, f64)>,
    /// (a, b, c)
    pub coefficients: (f64, f64, f64),
    /// max |fit(s) − y| over the points
    pub residual: f64,
}

impl ScalingFit {
    pub fn evaluate(&self, s: f64) -> f64 {
        let (a, b, c) = self.coefficients;
        (a * s + b) * s + c
    }

    /// Smallest upward crossing of `level` (in y units) at or beyond the
    /// fitted range's start, if one exists.
    pub fn upward_crossing(&self, level: f64) -> Option<f64> {
        let (a, b, c) = self.coefficients;
        let c0 = c - level;
        let roots: Vec<f64> = if a.abs() < 1e-300 {
            if b.abs() < 1e-300 {
                return None;
            }
            vec![-c0 / b]
        } else {
            let disc = b * b - 4.0 * a * c0;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            vec![(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
        };
        let mut up: Vec<f64> = roots
            .into_iter()
            .filter(|&r| {
                let slope = 2.0 * a * r + b;
                slope > 0.0
            })
            .collect();
        up.sort_by(|x, y| x.partial_cmp(y).unwrap());
        up.into_iter().next()
    }
}

/// Least-squares quadratic via QR (Householder) on the Vandermonde system;
/// exact interpolation for three points, rank-deficiency reported when the
/// scales collapse.
pub fn fit_quadratic(points: &[(f64, f64)]) -> Result<ScalingFit, FitError> {
    let n = points.len();
    if n < 3 {
        return Err(FitError::TooFewPoints(n));
    }
    // Column-major Vandermonde [1, s, s²].
    let mut a = vec![0.0f64; n * 3];
    let mut y = vec![0.0f64; n];
    for (i, &(s, v)) in points.iter().enumerate() {
        a[i] = 1.0;
        a[n + i] = s;
        a[2 * n + i] = s * s;
        y[i] = v;
    }
    // Householder QR, applying reflections to y as we go.
    for col in 0..3 {
        let offset = col * n;
        let mut norm = 0.0;
        for i in col..n {
            norm += a[offset + i] * a[offset + i];
        }
        let norm = norm.sqrt();
        if norm < 1e-12 {
            return Err(FitError::RankDeficient);
        }
        let alpha = if a[offset + col] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        for i in col..n {
            v[i] = a[offset + i];
        }
        v[col] -= alpha;
        let vnorm_sq: f64 = v[col..].iter().map(|x| x * x).sum();
        if vnorm_sq < 1e-300 {
            return Err(FitError::RankDeficient);
        }
        for target_col in col..3 {
            let toff = target_col * n;
            let dot: f64 = (col..n).map(|i| v[i] * a[toff + i]).sum();
            let f = 2.0 * dot / vnorm_sq;
            for i in col..n {
                a[toff + i] -= f * v[i];
            }
        }
        let dot: f64 = (col..n).map(|i| v[i] * y[i]).sum();
        let f = 2.0 * dot / vnorm_sq;
        for i in col..n {
            y[i] -= f * v[i];
        }
    }
    // Back-substitute the 3x3 triangular system.
    let r = |i: usize, j: usize| a[j * n + i];
    if r(2, 2).abs() < 1e-12 || r(1, 1).abs() < 1e-12 || r(0, 0).abs() < 1e-12 {
        return Err(FitError::RankDeficient);
    }
    let c2 = y[2] / r(2, 2);
    let c1 = (y[1] - r(1, 2) * c2) / r(1, 1);
    let c0 = (y[0] - r(0, 1) * c1 - r(0, 2) * c2) / r(0, 0);
    let coefficients = (c2, c1, c0);
    let fit = ScalingFit { points: points.to_vec(), coefficients, residual: 0.0 };
    let residual = points
        .iter()
        .map(|&(s, v)| (fit.evaluate(s) - v).abs())
        .fold(0.0, f64::max);
    Ok(ScalingFit { residual, ..fit })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergencePrediction {
    pub target_scale: f64,
    pub predicted_value: f64,
    pub threshold: f64,
    pub will_diverge: bool,
}

/// Evaluates a fit (built in log10-log10 space) at a target parameter count
/// and compares the predicted characteristic against the threshold.
pub fn predict_divergence(fit: &ScalingFit, target_params: f64, threshold: f64) -> DivergencePrediction {
    let s = target_params.log10();
    let predicted_value = 10f64.powf(fit.evaluate(s));
    DivergencePrediction {
        target_scale: target_params,
        predicted_value,
        threshold,
        will_diverge: predicted_value > threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderMode {
    /// Fixed depth, width (and heads) grow; head_dim stays constant.
    Width,
    /// Fixed width, depth grows.
    Depth,
    /// Width and depth grow together.
    Joint,
}

/// Builds a ladder of model configs from a template by applying integer
/// multipliers per rung. Width rungs multiply model_dim (heads scale along,
/// head_dim fixed); depth rungs multiply num_layers; joint rungs multiply
/// both.
pub fn scaling_ladder(template: &ModelConfig, mode: LadderMode, rungs: &[usize]) -> Vec<ModelConfig> {
    rungs
        .iter()
        .map(|&m| {
            let mut cfg = template.clone();
            match mode {
                LadderMode::Width => {
                    cfg.model_dim = template.model_dim * m;
                    cfg.num_heads = cfg.model_dim / cfg.head_dim;
                }
                LadderMode::Depth => {
                    cfg.num_layers = template.num_layers * m;
                }
                LadderMode::Joint => {
                    cfg.model_dim = template.model_dim * m;
                    cfg.num_heads = cfg.model_dim / cfg.head_dim;
                    cfg.num_layers = template.num_layers * m;
                }
            }
            cfg
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_parameters;

    #[test]
    fn sensitivity_hand_values() {
        let grid = LR_GRID;
        let equal: Vec<(f64, f64)> = grid.iter().map(|&lr| (lr, 3.0)).collect();
        assert_eq!(lr_sensitivity(&equal, &grid).unwrap(), 0.0);

        let mut losses: Vec<(f64, f64)> = grid.iter().map(|&lr| (lr, 1.0)).collect();
        losses[6].1 = 8.0;
        assert!((lr_sensitivity(&losses, &grid).unwrap() - 1.0).abs() < 1e-12);

        // shift invariance
        let shifted: Vec<(f64, f64)> = losses.iter().map(|&(lr, l)| (lr, l + 5.0)).collect();
        assert!(
            (lr_sensitivity(&losses, &grid).unwrap() - lr_sensitivity(&shifted, &grid).unwrap()).abs()
                < 1e-12
        );
    }

    #[test]
    fn sensitivity_reports_missing_points() {
        let partial = vec![(3e-4, 1.0)];
        match lr_sensitivity(&partial, &LR_GRID) {
            Err(SweepError::MissingPoints(missing)) => assert_eq!(missing.len(), 6),
            other => panic!("expected missing points, got {other:?}"),
        }
    }

    #[test]
    fn fit_recovers_exact_quadratic() {
        let pts: Vec<(f64, f64)> = [1.0f64, 2.0, 3.0, 4.0].iter().map(|&s| (s, s * s)).collect();
        let fit = fit_quadratic(&pts).unwrap();
        let (a, b, c) = fit.coefficients;
        assert!((a - 1.0).abs() < 1e-9 && b.abs() < 1e-9 && c.abs() < 1e-9);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn fit_interpolates_three_points() {
        let pts = vec![(0.0, 1.3), (1.0, -0.4), (2.5, 7.9)];
        let fit = fit_quadratic(&pts).unwrap();
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn fit_is_permutation_invariant() {
        let pts = vec![(0.5, 2.0), (1.5, 0.2), (2.0, 3.3), (3.0, 1.1), (4.5, 9.0)];
        let mut rev = pts.clone();
        rev.reverse();
        let f1 = fit_quadratic(&pts).unwrap();
        let f2 = fit_quadratic(&rev).unwrap();
        let (a1, b1, c1) = f1.coefficients;
        let (a2, b2, c2) = f2.coefficients;
        assert!((a1 - a2).abs() < 1e-9 && (b1 - b2).abs() < 1e-9 && (c1 - c2).abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_conflicting_duplicates() {
        let pts = vec![(1.0, 0.0), (1.0, 1.0), (1.0, 2.0)];
        assert!(matches!(fit_quadratic(&pts), Err(FitError::RankDeficient)));
    }

    #[test]
    fn prediction_threshold_cases() {
        let low = fit_quadratic(&[(5.0, 1.0), (6.0, 1.0), (7.0, 1.0)]).unwrap();
        assert!(!predict_divergence(&low, 1e8, DIVERGENCE_THRESHOLD).will_diverge);
        let high = fit_quadratic(&[(5.0, 5.0), (6.0, 5.0), (7.0, 5.0)]).unwrap();
        assert!(predict_divergence(&high, 1e8, DIVERGENCE_THRESHOLD).will_diverge);
    }

    #[test]
    fn ladder_modes() {
        let template = ModelConfig {
            model_dim: 64,
            num_layers: 2,
            num_heads: 2,
            head_dim: 32,
            ..ModelConfig::default()
        };
        let width = scaling_ladder(&template, LadderMode::Width, &[1, 2, 4]);
        for cfg in &width {
            assert_eq!(cfg.num_heads, cfg.model_dim / cfg.head_dim);
            assert_eq!(cfg.num_layers, 2);
        }
        let depth = scaling_ladder(&template, LadderMode::Depth, &[1, 2, 4]);
        assert!(depth.iter().all(|c| c.model_dim == 64));
        assert_eq!(depth[2].num_layers, 8);
        let joint = scaling_ladder(&template, LadderMode::Joint, &[1, 2, 4]);
        let counts: Vec<usize> = joint.iter().map(count_parameters).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]));
    }
}
