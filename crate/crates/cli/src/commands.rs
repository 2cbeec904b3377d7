//! Subcommand implementations: train, sweep, analyze, transplant, gradcheck.

use crate::artifacts::{read_metric_column, read_summary, write_json, write_metrics_csv, RunSummary};
use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig};
use anyhow::{bail, Context, Result};
use serde::Serialize;
use stabilitylab::metrics::{default_window, window_mean, WindowSummary};
use stabilitylab::model::{self, count_parameters, ModelConfig, QkLayerNorm};
use stabilitylab::optim::DecayMode;
use stabilitylab::parallel::par_map;
use stabilitylab::sweep::{
    fit_quadratic, lr_sensitivity, predict_divergence, DivergencePrediction, GridPoint,
    ScalingFit, SweepResult, LR_GRID, LR_GRID_LOW,
};
use stabilitylab::tensor::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
use stabilitylab::tensor::Tape;
use stabilitylab::train::{train, TrainOutcome, TrainSetup};
use stabilitylab::Scalar;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Metrics summarized into summary.json window means.
const SUMMARY_METRICS: &[&str] = &[
    "train_loss",
    "log_z_mean",
    "abs_log_z_mean",
    "max_attn_logit_l0",
    "grad_rms_b0",
    "update_rms_b0",
    "param_rms_b0",
    "block_out_rms_b0",
];

struct RunArtifacts {
    final_eval_loss: f64,
    diverged: bool,
    summaries: BTreeMap<String, WindowSummary>,
}

/// Trains with the configured precision and writes metrics.csv,
/// summary.json, and checkpoint.bin into `dir`.
fn run_and_persist(config: &RunConfig, setup: &TrainSetup, dir: &Path) -> Result<RunArtifacts> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    match config.precision {
        Precision::F64 => persist_outcome(setup, train::<f64>(setup)?, dir),
        Precision::F32 => persist_outcome(setup, train::<f32>(setup)?, dir),
    }
}

fn persist_outcome<T: Scalar>(setup: &TrainSetup, outcome: TrainOutcome<T>, dir: &Path) -> Result<RunArtifacts> {
    write_metrics_csv(&dir.join("metrics.csv"), setup.model.num_layers, &outcome.records)?;
    let window = default_window(setup.optimizer.total_steps);
    let mut summaries = BTreeMap::new();
    for metric in SUMMARY_METRICS {
        if let Ok(w) = window_mean(&outcome.records, metric, window) {
            if w.mean.is_finite() {
                summaries.insert(metric.to_string(), w);
            }
        }
    }
    let summary = RunSummary {
        final_eval_loss: outcome.final_eval_loss,
        diverged: outcome.diverged,
        lr_sensitivity: None,
        non_embedding_params: outcome.non_embedding_params as u64,
        window_summaries: summaries.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Checkpoint::from_state(&outcome.params, &outcome.opt_state).save(&dir.join("checkpoint.bin"))?;
    Ok(RunArtifacts {
        final_eval_loss: outcome.final_eval_loss,
        diverged: outcome.diverged,
        summaries,
    })
}

pub fn cmd_train(config_path: &Path, output: Option<&Path>) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let setup = config.setup();
    let dir = config.resolve_output(output)?;
    let artifacts = run_and_persist(&config, &setup, &dir)?;
    println!(
        "trained {} steps: final eval loss {:.6}{} ({} non-embedding params) -> {}",
        setup.optimizer.total_steps,
        artifacts.final_eval_loss,
        if artifacts.diverged { " [diverged]" } else { "" },
        count_parameters(&setup.model),
        dir.display()
    );
    Ok(())
}

/// Overrides applied on top of the config file by sweep/transplant flags.
#[derive(Debug, Default, Clone)]
pub struct Interventions {
    pub qk_layernorm: Option<QkLayerNorm>,
    pub zloss_coeff: Option<f64>,
    pub decay_mode: Option<DecayMode>,
    pub weight_decay: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub eps: Option<f64>,
    pub mup: Option<model::MupMode>,
    pub attention_kind: Option<model::AttentionKind>,
}

impl Interventions {
    pub fn apply(&self, setup: &mut TrainSetup) {
        if let Some(qk) = self.qk_layernorm {
            setup.model.qk_layernorm = qk;
        }
        if let Some(z) = self.zloss_coeff {
            setup.optimizer.zloss_coeff = z;
        }
        if let Some(d) = self.decay_mode {
            setup.optimizer.decay_mode = d;
        }
        if let Some(w) = self.weight_decay {
            setup.optimizer.weight_decay = w;
        }
        if let Some(w) = self.warmup_steps {
            setup.optimizer.warmup_steps = w;
        }
        if let Some(e) = self.eps {
            setup.optimizer.eps = e;
        }
        if let Some(m) = self.mup {
            setup.model.mup_mode = m;
            setup.optimizer.lr_scaling = if m == model::MupMode::Off {
                stabilitylab::optim::LrScaling::None
            } else {
                stabilitylab::optim::LrScaling::Mup
            };
        }
        if let Some(a) = self.attention_kind {
            setup.model.attention_kind = a;
        }
    }
}

fn lr_dir_name(lr: f64) -> String {
    format!("lr_{lr:e}").replace('-', "m")
}

pub fn cmd_sweep(
    config_path: &Path,
    output: Option<&Path>,
    grid: &[f64],
    jobs: usize,
    dual_range: bool,
    interventions: &Interventions,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let dir = config.resolve_output(output)?;
    std::fs::create_dir_all(&dir)?;
    let mut base = config.setup();
    interventions.apply(&mut base);

    let mut lrs: Vec<f64> = grid.to_vec();
    if dual_range {
        for &lr in LR_GRID_LOW.iter().chain(LR_GRID.iter()) {
            if !lrs.iter().any(|&u| (u - lr).abs() < 1e-15) {
                lrs.push(lr);
            }
        }
    }
    if lrs.is_empty() {
        bail!("empty learning-rate grid");
    }

    let runs: Vec<(f64, TrainSetup, PathBuf)> = lrs
        .iter()
        .map(|&lr| {
            let mut setup = base.clone();
            setup.optimizer.max_lr = lr;
            (lr, setup, dir.join(lr_dir_name(lr)))
        })
        .collect();
    let config_ref = &config;
    let results: Vec<Result<GridPoint>> = par_map(runs, jobs.max(1), |(lr, setup, run_dir)| {
        let artifacts = run_and_persist(config_ref, &setup, &run_dir)?;
        Ok(GridPoint {
            lr,
            final_eval_loss: artifacts.final_eval_loss,
            diverged: artifacts.diverged,
            window_summaries: artifacts.summaries,
        })
    });
    let mut points = Vec::with_capacity(results.len());
    for r in results {
        points.push(r?);
    }
    let losses: Vec<(f64, f64)> = points.iter().map(|p| (p.lr, p.final_eval_loss)).collect();
    let sensitivity = if dual_range {
        let hi = lr_sensitivity(&losses, &LR_GRID)?;
        let lo = lr_sensitivity(&losses, &LR_GRID_LOW)?;
        hi.min(lo)
    } else {
        lr_sensitivity(&losses, &lrs)?
    };
    let best_loss = points.iter().map(|p| p.final_eval_loss).fold(f64::INFINITY, f64::min);
    let result = SweepResult { grid: points, best_loss, lr_sensitivity: sensitivity };
    write_json(&dir.join("sweep_summary.json"), &result)?;
    println!("sweep over {} learning rates: best loss {best_loss:.6}, lr sensitivity {sensitivity:.6}", lrs.len());
    for p in &result.grid {
        println!(
            "  lr {:>8.0e}  loss {:.6}{}",
            p.lr,
            p.final_eval_loss,
            if p.diverged { "  [diverged]" } else { "" }
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AnalysisReport {
    fit: ScalingFit,
    #[serde(skip_serializing_if = "Option::is_none")]
    prediction: Option<DivergencePrediction>,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    points_file: Option<&Path>,
    run_dirs: &[PathBuf],
    metric: &str,
    probe_step: Option<u64>,
    target_scale: Option<f64>,
    threshold: f64,
    output: Option<&Path>,
) -> Result<()> {
    let mut points: Vec<(f64, f64)> = Vec::new();
    if let Some(file) = points_file {
        let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if lineno == 0 && line.chars().any(|c| c.is_alphabetic()) {
                continue; // header row
            }
            let mut parts = line.split(',');
            let params: f64 = parts
                .next()
                .context("missing params column")?
                .trim()
                .parse()
                .with_context(|| format!("{}:{}", file.display(), lineno + 1))?;
            let value: f64 = parts
                .next()
                .context("missing value column")?
                .trim()
                .parse()
                .with_context(|| format!("{}:{}", file.display(), lineno + 1))?;
            points.push((params.log10(), value.log10()));
        }
    } else {
        for dir in run_dirs {
            let summary = read_summary(&dir.join("summary.json"))?;
            let column = read_metric_column(&dir.join("metrics.csv"), metric)?;
            if column.is_empty() {
                bail!("{}: no values for metric {metric}", dir.display());
            }
            let last_step = column.last().unwrap().0;
            // default probe step: 2% into the run
            let probe = probe_step.unwrap_or_else(|| (last_step as f64 * 0.02).round() as u64);
            let (_, value) = column
                .iter()
                .min_by_key(|(s, _)| s.abs_diff(probe))
                .copied()
                .unwrap();
            if value <= 0.0 {
                bail!("{}: metric {metric} is not positive at the probe step", dir.display());
            }
            points.push(((summary.non_embedding_params as f64).log10(), value.log10()));
        }
    }
    if points.len() < 3 {
        bail!("need at least 3 points to fit, got {}", points.len());
    }
    let fit = fit_quadratic(&points)?;
    let prediction = target_scale.map(|scale| predict_divergence(&fit, scale, threshold));
    let (a, b, c) = fit.coefficients;
    println!("fit: y = {a:.6}*s^2 + {b:.6}*s + {c:.6}  (log10-log10, residual {:.3e})", fit.residual);
    if let Some(p) = &prediction {
        println!(
            "at {:.3e} params: predicted {metric} = {:.4e} -> {}",
            p.target_scale,
            p.predicted_value,
            if p.will_diverge { "expected to diverge" } else { "below the divergence threshold" }
        );
    }
    let report = AnalysisReport { fit, prediction };
    if let Some(out) = output {
        write_json(out, &report)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TransplantRow {
    kappa: Option<f64>,
    final_eval_loss: f64,
    diverged: bool,
}

#[derive(Debug, Serialize)]
struct TransplantReport {
    bigram_loss: f64,
    rows: Vec<TransplantRow>,
}

pub fn cmd_transplant(
    config_path: &Path,
    output: Option<&Path>,
    kappas: &[f64],
    jobs: usize,
) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let dir = config.resolve_output(output)?;
    std::fs::create_dir_all(&dir)?;
    let base = config.setup();

    let mut runs: Vec<(Option<f64>, TrainSetup, PathBuf)> = Vec::new();
    // zero-layer bigram floor
    let mut bigram = base.clone();
    bigram.model.num_layers = 0;
    bigram.model.transplant_kappa = None;
    runs.push((None, bigram, dir.join("bigram")));
    // untransplanted reference
    let mut reference = base.clone();
    reference.model.transplant_kappa = None;
    runs.push((None, reference, dir.join("untransplanted")));
    for &kappa in kappas {
        let mut s = base.clone();
        s.model.transplant_kappa = Some(kappa);
        runs.push((Some(kappa), s, dir.join(format!("kappa_{kappa:e}").replace('-', "m"))));
    }

    let config_ref = &config;
    let results: Vec<Result<(Option<f64>, RunArtifacts)>> = par_map(runs, jobs.max(1), |(kappa, setup, run_dir)| {
        let artifacts = run_and_persist(config_ref, &setup, &run_dir)?;
        Ok((kappa, artifacts))
    });
    let mut rows = Vec::new();
    let mut bigram_loss = f64::NAN;
    let mut untransplanted = f64::NAN;
    for (idx, r) in results.into_iter().enumerate() {
        let (kappa, artifacts) = r?;
        match idx {
            0 => bigram_loss = artifacts.final_eval_loss,
            1 => {
                untransplanted = artifacts.final_eval_loss;
                rows.push(TransplantRow {
                    kappa: None,
                    final_eval_loss: artifacts.final_eval_loss,
                    diverged: artifacts.diverged,
                });
            }
            _ => rows.push(TransplantRow {
                kappa,
                final_eval_loss: artifacts.final_eval_loss,
                diverged: artifacts.diverged,
            }),
        }
    }
    let report = TransplantReport { bigram_loss, rows };
    write_json(&dir.join("transplant.json"), &report)?;
    println!("bigram baseline loss {bigram_loss:.6}; untransplanted {untransplanted:.6}");
    for row in &report.rows {
        match row.kappa {
            Some(k) => println!(
                "  kappa {k:>10.0e}  loss {:.6}{}",
                row.final_eval_loss,
                if row.diverged { "  [diverged]" } else { "" }
            ),
            None => {}
        }
    }
    Ok(())
}

/// Builds the full-model gradient check the verification command runs:
/// every parameter of a small transformer against central differences.
pub fn cmd_gradcheck(
    model_dim: usize,
    num_layers: usize,
    head_dim: usize,
    vocab_size: usize,
    context: usize,
    jobs: usize,
) -> Result<bool> {
    let cfg = ModelConfig {
        model_dim,
        num_layers,
        num_heads: model_dim / head_dim.max(1),
        head_dim,
        vocab_size,
        context_length: context,
        ..ModelConfig::default()
    };
    cfg.validate()?;
    let params = model::init_parameters::<f64>(&cfg, 12)?;
    let tokens: Vec<usize> = (0..context).map(|i| (i * 7 + 1) % vocab_size).collect();
    let targets: Vec<usize> = (0..context).map(|i| (i * 7 + 3) % vocab_size).collect();
    let leaves: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.data().to_vec()))
        .collect();
    let layout = params.layout().clone();

    let run = |ls: &[(String, Vec<f64>)], want_grads: bool| {
        let mut tape = Tape::new();
        let mut source = params.clone();
        for (p, (_, data)) in source.iter_mut().zip(ls) {
            p.tensor.data_mut().copy_from_slice(data);
        }
        let bound = source.bind(&mut tape);
        let out = model::forward(&mut tape, &cfg, &bound, &layout, &tokens, 1, context)
            .expect("forward in gradcheck");
        let lse = tape.lse(out.logits).unwrap();
        let picked = tape.pick_target(out.logits, &targets).unwrap();
        let per_token = tape.sub(lse, picked).unwrap();
        let ce = tape.mean(per_token);
        let sq = tape.mul(lse, lse).unwrap();
        let zm = tape.mean(sq);
        let zl = tape.scale(zm, 1e-4);
        let loss = tape.add(ce, zl).unwrap();
        let value = tape.value(loss)[0];
        if !want_grads {
            return (value, Vec::new());
        }
        let mut grads = tape.backward(loss);
        let gv = bound
            .ids
            .iter()
            .map(|&id| grads.take(id).unwrap_or_else(|| vec![0.0; tape.value(id).len()]))
            .collect();
        (value, gv)
    };

    let report = check_gradients(
        &leaves,
        |ls| run(ls, true),
        |ls| run(ls, false).0,
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        jobs,
    );
    println!(
        "gradient check: {num_layers}-block model_dim {model_dim}, {} parameters",
        leaves.iter().map(|(_, d)| d.len()).sum::<usize>()
    );
    for leaf in &report.leaves {
        println!(
            "  {:32} {:>8} elems  max rel err {:.3e}",
            leaf.name, leaf.elements, leaf.max_rel_err
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e}): {}",
        report.max_rel_err,
        report.tolerance,
        if report.passed() { "pass" } else { "FAIL" }
    );
    Ok(report.passed())
}
