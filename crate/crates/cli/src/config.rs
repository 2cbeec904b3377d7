//! Run configuration files: a single TOML document holding the model,
//! optimizer, and corpus tables plus run-level settings. Unknown keys are
//! rejected so a typoed hyperparameter cannot silently fall back to a
//! default.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stabilitylab::data::CorpusSpec;
use stabilitylab::model::ModelConfig;
use stabilitylab::optim::OptimizerConfig;
use stabilitylab::train::TrainSetup;
use std::path::{Path, PathBuf};

pub const SEED_ENV: &str = "STABILITYLAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub batch_size: usize,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub eval_sequences: usize,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub corpus: CorpusSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.batch_size == 0 {
            cfg.batch_size = TrainSetup::default().batch_size;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .parse()
                .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {seed:?}"))?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            corpus: self.corpus.clone(),
            batch_size: self.batch_size,
            seed: self.seed,
            log_interval: self.log_interval.max(1),
            eval_interval: self.eval_interval,
            eval_sequences: self.eval_sequences.max(1),
        }
    }

    /// Output directory from the config or the command line; at least one
    /// must name it.
    pub fn resolve_output(&self, flag: Option<&Path>) -> Result<PathBuf> {
        match flag.map(Path::to_path_buf).or_else(|| self.output_dir.clone()) {
            Some(dir) => Ok(dir),
            None => bail!("no output directory: set output_dir in the config or pass --output"),
        }
    }
}

impl RunConfig {
    /// Defaults mirror `TrainSetup`, which carries the desk-scale training
    /// configuration.
    pub fn desk_default() -> Self {
        let setup = TrainSetup::default();
        Self {
            seed: setup.seed,
            precision: Precision::F64,
            batch_size: setup.batch_size,
            log_interval: setup.log_interval,
            eval_interval: setup.eval_interval,
            eval_sequences: setup.eval_sequences,
            output_dir: None,
            model: setup.model,
            optimizer: setup.optimizer,
            corpus: setup.corpus,
        }
    }
}
