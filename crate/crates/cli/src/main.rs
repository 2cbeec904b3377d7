//! Experiment orchestration for the training-stability laboratory.
//!
//! Exit codes: 0 success, 1 usage error, 2 run failure, 3 verification
//! failure.

mod artifacts;
mod checkpoint;
mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use commands::Interventions;
use stabilitylab::model::{AttentionKind, MupMode, QkLayerNorm};
use stabilitylab::optim::DecayMode;
use stabilitylab::parallel::default_jobs;
use stabilitylab::sweep::{DIVERGENCE_THRESHOLD, LR_GRID};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "stabilitylab", about = "Desk-scale transformer training stability laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct InterventionFlags {
    /// Override qk-layernorm placement: off, per_head, model_dim
    #[arg(long)]
    qk_layernorm: Option<String>,
    /// Override the z-loss coefficient
    #[arg(long)]
    zloss_coeff: Option<f64>,
    /// Override the decay mode: independent, coupled
    #[arg(long)]
    decay_mode: Option<String>,
    /// Override the weight decay
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Override warmup steps
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Override the AdamW epsilon
    #[arg(long)]
    eps: Option<f64>,
    /// Override the muP mode: off, simple, intermediate, full
    #[arg(long)]
    mup: Option<String>,
    /// Override the attention kind: softmax, pointwise_squared_relu
    #[arg(long)]
    attention_kind: Option<String>,
}

impl InterventionFlags {
    fn parse(&self) -> Result<Interventions, String> {
        let mut iv = Interventions::default();
        if let Some(qk) = &self.qk_layernorm {
            iv.qk_layernorm = Some(match qk.as_str() {
                "off" => QkLayerNorm::Off,
                "per_head" => QkLayerNorm::PerHead,
                "model_dim" => QkLayerNorm::ModelDim,
                other => return Err(format!("unknown qk-layernorm mode {other}")),
            });
        }
        if let Some(d) = &self.decay_mode {
            iv.decay_mode = Some(match d.as_str() {
                "independent" => DecayMode::Independent,
                "coupled" => DecayMode::Coupled,
                other => return Err(format!("unknown decay mode {other}")),
            });
        }
        if let Some(m) = &self.mup {
            iv.mup = Some(match m.as_str() {
                "off" => MupMode::Off,
                "simple" => MupMode::Simple,
                "intermediate" => MupMode::Intermediate,
                "full" => MupMode::Full,
                other => return Err(format!("unknown mup mode {other}")),
            });
        }
        if let Some(a) = &self.attention_kind {
            iv.attention_kind = Some(match a.as_str() {
                "softmax" => AttentionKind::Softmax,
                "pointwise_squared_relu" => AttentionKind::PointwiseSquaredRelu,
                other => return Err(format!("unknown attention kind {other}")),
            });
        }
        iv.zloss_coeff = self.zloss_coeff;
        iv.weight_decay = self.weight_decay;
        iv.warmup_steps = self.warmup_steps;
        iv.eps = self.eps;
        Ok(iv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file and write run artifacts.
    Train {
        /// Path to the run config (toml)
        config: PathBuf,
        /// Output directory (overrides the config's output_dir)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a learning-rate sweep: one subdirectory per grid point.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Comma-separated learning rates (defaults to the 7-point grid)
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        /// Concurrent runs
        #[arg(long)]
        jobs: Option<usize>,
        /// Also sweep the shifted grid and report the minimum sensitivity
        /// over both ranges
        #[arg(long)]
        dual_range: bool,
        #[command(flatten)]
        interventions: InterventionFlags,
    },
    /// Fit a quadratic scaling trend and predict divergence at a target
    /// scale.
    Analyze {
        /// csv of (non_embedding_params, value) rows
        #[arg(long)]
        points_file: Option<PathBuf>,
        /// Run directories to read points from
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Metric column to fit when reading runs
        #[arg(long, default_value = "max_attn_logit_L0")]
        fit: String,
        /// Step to probe the metric at (default: 2% of the run)
        #[arg(long)]
        probe_step: Option<u64>,
        /// Parameter count to extrapolate to
        #[arg(long)]
        target_scale: Option<f64>,
        /// Divergence threshold on the fitted characteristic
        #[arg(long, default_value_t = DIVERGENCE_THRESHOLD)]
        threshold: f64,
        /// Where to write the fit report json
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train with query/key magnitudes transplanted to sqrt(kappa), plus the
    /// untransplanted and zero-layer baselines.
    Transplant {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Comma-separated kappa values
        #[arg(long, value_delimiter = ',', default_value = "1,100,10000")]
        kappa: Vec<f64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check every model gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 64)]
        model_dim: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        head_dim: usize,
        #[arg(long, default_value_t = 24)]
        vocab_size: usize,
        #[arg(long, default_value_t = 5)]
        context: usize,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version are successful exits; anything else is usage
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config, output } => {
            commands::cmd_train(&config, output.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, output, grid, jobs, dual_range, interventions } => {
            let iv = match interventions.parse() {
                Ok(iv) => iv,
                Err(msg) => {
                    eprintln!("error: {msg}");
                    return Ok(ExitCode::from(1));
                }
            };
            let grid = if grid.is_empty() { LR_GRID.to_vec() } else { grid };
            commands::cmd_sweep(
                &config,
                output.as_deref(),
                &grid,
                jobs.unwrap_or_else(default_jobs),
                dual_range,
                &iv,
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { points_file, runs, fit, probe_step, target_scale, threshold, output } => {
            if points_file.is_none() && runs.len() < 3 {
                eprintln!("error: need --points-file or at least 3 --runs directories");
                return Ok(ExitCode::from(1));
            }
            commands::cmd_analyze(
                points_file.as_deref(),
                &runs,
                &fit,
                probe_step,
                target_scale,
                threshold,
                output.as_deref(),
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Transplant { config, output, kappa, jobs } => {
            commands::cmd_transplant(&config, output.as_deref(), &kappa, jobs.unwrap_or_else(default_jobs))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { model_dim, layers, head_dim, vocab_size, context, jobs } => {
            let passed = commands::cmd_gradcheck(
                model_dim,
                layers,
                head_dim,
                vocab_size,
                context,
                jobs.unwrap_or_else(default_jobs),
            )?;
            Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
    }
}
