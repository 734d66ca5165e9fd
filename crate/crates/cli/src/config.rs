use std::fmt;
use std::path::{Path, PathBuf};

use karma_core::evalkit::{CompareConfig, EvalOptions};
use karma_core::model::ModelConfig;
use karma_core::objectives::LossBreakdown;
use karma_core::synthdata::GeneratorConfig;
use karma_core::trainer::{TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

pub const OUTPUT_ROOT_ENV: &str = "KARMA_OUTPUT_ROOT";

#[derive(Debug)]
pub enum CliError {
    /// Invalid config, arguments, inputs or paths.
    Usage(String),
    Numeric {
        msg: String,
        last: Option<LossBreakdown>,
    },
    /// Some preset cells failed; the report was still written.
    Partial(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric { .. } => 3,
            CliError::Partial(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Partial(m) => f.write_str(m),
            CliError::Numeric { msg, last } => {
                write!(f, "{msg}")?;
                match last {
                    Some(l) => write!(
                        f,
                        "\nlast loss breakdown: {}",
                        serde_json::to_string(l).unwrap_or_default()
                    ),
                    None => write!(f, "\nno step completed before the failure"),
                }
            }
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric { last, .. } => CliError::Numeric {
                msg: e.to_string(),
                last,
            },
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<karma_core::evalkit::EvalError> for CliError {
    fn from(e: karma_core::evalkit::EvalError) -> Self {
        match e {
            karma_core::evalkit::EvalError::Train(t) => t.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Usage(e.to_string())
            }
        }
    )*};
}
usage_from!(
    std::io::Error,
    serde_json::Error,
    karma_core::synthdata::DataError,
    karma_core::model::ModelError,
    karma_core::model::CheckpointError,
    karma_core::model::RecordError
);

/// Everything one experiment needs. Sections left out take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: GeneratorConfig,
    pub holdout_fraction: f64,
    /// Data-dependent sizes (vocabulary, item length, visual and query
    /// counts) are taken from `data`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub generators: CompareConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Write a checkpoint every this many steps of a stage (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: GeneratorConfig::default(),
            holdout_fraction: 0.2,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            generators: CompareConfig::default(),
            output_dir: PathBuf::from("karma-out"),
            seeds: vec![0, 1, 2],
            checkpoint_every: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.sync_model();
        Ok(cfg)
    }

    pub fn sync_model(&mut self) {
        self.model.vocab_size = self.data.vocab_size;
        self.model.item_len = self.data.item_len;
        self.model.visual_dim = self.data.visual_dim;
        self.model.num_queries = self.data.num_queries();
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(CliError::Usage("holdout_fraction must be in (0, 1)".into()));
        }
        let e = &self.eval;
        if e.hr_ks.is_empty() || e.hr_ks.iter().chain(&e.js_ks).any(|&k| k == 0) || e.batch == 0 {
            return Err(CliError::Usage(
                "eval: K lists need positive values and batch must be positive".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seed list is empty".into()));
        }
        Ok(())
    }

    /// `output_dir`, placed under the output-root environment variable when
    /// that is set and the directory is relative.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
