//! Two-stage training: semantic warm-up on isolated item embeddings, then
//! joint training on behavior sequences with the variant's loss.
//!
//! Every random choice is drawn from a stream derived from
//! `(seed, purpose, stage, step)`, so a run can be resumed from any
//! checkpoint and continue bit-for-bit.

mod batch;
mod run;

pub use batch::{build_examples, sample_negatives, BatchTarget, Example, NegSource, NegativeSet};
pub use run::{data_fingerprint, Stage, StepRecord, TrainState, Trainer, LOG_HEADER};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{AdamWConfig, DiffError};
use crate::model::checkpoint::CheckpointError;
use crate::model::ModelError;
use crate::objectives::{LossBreakdown, LossWeights, ObjectiveError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("numeric failure in {stage} step {step}: {source}")]
    Numeric {
        stage: Stage,
        step: usize,
        source: DiffError,
        last: Option<LossBreakdown>,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint was written for different data (fingerprint {found}, expected {expected})")]
    DataMismatch { found: String, expected: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GeneratorKind {
    Mse,
    Ddpm,
    Edm,
    Fm,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 4] = [Self::Mse, Self::Ddpm, Self::Edm, Self::Fm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::Ddpm => "ddpm",
            Self::Edm => "edm",
            Self::Fm => "fm",
        }
    }
}

impl FromStr for GeneratorKind {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown generator {s:?}")))
    }
}

/// Loss recipe of the joint stage.
///
/// `generator:*` variants train the text-only KARMA base; the generator head
/// itself is fit afterwards on the frozen base (see `evalkit::compare_generators`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    ActionOnly,
    Task1,
    Task2,
    Karma,
    KarmaMm,
    Generator(GeneratorKind),
}

impl Variant {
    pub const TABLE1: [Variant; 5] = [Self::ActionOnly, Self::Task1, Self::Task2, Self::Karma, Self::KarmaMm];

    /// Default (gen, recon, img) switches.
    pub fn components(self) -> (bool, bool, bool) {
        match self {
            Self::ActionOnly => (false, false, false),
            Self::Task1 => (true, false, false),
            Self::Task2 => (false, true, false),
            Self::Karma | Self::Generator(_) => (true, true, false),
            Self::KarmaMm => (true, true, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ActionOnly => f.write_str("action-only"),
            Self::Task1 => f.write_str("task1"),
            Self::Task2 => f.write_str("task2"),
            Self::Karma => f.write_str("karma"),
            Self::KarmaMm => f.write_str("karma-mm"),
            Self::Generator(k) => write!(f, "generator:{}", k.as_str()),
        }
    }
}

impl FromStr for Variant {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "action-only" => Self::ActionOnly,
            "task1" => Self::Task1,
            "task2" => Self::Task2,
            "karma" => Self::Karma,
            "karma-mm" => Self::KarmaMm,
            _ => match s.strip_prefix("generator:") {
                Some(k) => Self::Generator(k.parse()?),
                None => return Err(TrainError::Config(format!("unknown variant {s:?}"))),
            },
        })
    }
}

impl TryFrom<String> for Variant {
    type Error = TrainError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ActionLoss {
    PairwiseCe,
    /// Ablation only.
    InfoNce {
        temperature: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImgObjective {
    Ddpm,
    Edm,
    Fm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub joint_steps: usize,
    pub batch_size: usize,
    /// Items per warm-up step.
    pub warmup_batch: usize,
    pub hard_negatives: usize,
    /// Cap on in-batch negatives; the count used is `min(batch - 1, cap)`.
    pub in_batch_negatives: usize,
    pub weights: LossWeights,
    /// Overrides the variant's Task-1 weight (0 removes the term).
    pub gen_weight: Option<f64>,
    /// Overrides the variant's Task-2 weight (0 removes the term).
    pub recon_weight: Option<f64>,
    pub img_objective: ImgObjective,
    pub action_loss: ActionLoss,
    pub optimizer: AdamWConfig,
    /// Linear learning-rate warm-up over this many optimizer steps (0 = off).
    pub lr_warmup_steps: usize,
    /// Global gradient-norm clip (`None` = off).
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub variant: Variant,
    /// Skip the warm-up stage.
    pub cold_start: bool,
    /// Keep the item encoder fixed during the joint stage.
    pub freeze_encoder: bool,
    /// Items whose id is `k - 1 mod k` are excluded from warm-up (0 = none).
    pub warmup_holdout_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 1000,
            joint_steps: 4000,
            batch_size: 32,
            warmup_batch: 32,
            hard_negatives: 4,
            in_batch_negatives: 8,
            weights: LossWeights::default(),
            gen_weight: None,
            recon_weight: None,
            img_objective: ImgObjective::Fm,
            action_loss: ActionLoss::PairwiseCe,
            optimizer: AdamWConfig::default(),
            lr_warmup_steps: 0,
            grad_clip: Some(1.0),
            seed: 0,
            variant: Variant::Karma,
            cold_start: false,
            freeze_encoder: false,
            warmup_holdout_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.warmup_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.hard_negatives == 0 && (self.in_batch_negatives == 0 || self.batch_size < 2) {
            return bad("at least one negative source must be able to produce negatives");
        }
        self.weights.validate()?;
        for w in [self.gen_weight, self.recon_weight].into_iter().flatten() {
            if !(w.is_finite() && w >= 0.0) {
                return bad("component weights must be finite and non-negative");
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("optimizer: lr must be positive and betas in [0, 1)");
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("optimizer: eps must be positive and weight decay non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        if let ActionLoss::InfoNce { temperature } = self.action_loss {
            if !(temperature > 0.0) {
                return bad("InfoNCE temperature must be positive");
            }
        }
        Ok(())
    }

    /// Effective (gen, recon, img) weights inside the decodability term.
    pub fn component_weights(&self) -> (f64, f64, bool) {
        let (g, r, i) = self.variant.components();
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        (self.gen_weight.unwrap_or(on(g)), self.recon_weight.unwrap_or(on(r)), i)
    }
}

/// SplitMix64-style mixing of a seed with a stream label.
pub(crate) fn stream_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut x = seed;
    for v in [tag, a, b] {
        x = x
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(v.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}
