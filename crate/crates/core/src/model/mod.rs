//! Continuous-token architecture.
//!
//! * [`ItemEncoder`]: bidirectional transformer over an item's text tokens,
//!   mean-pooled and projected to a single `d`-dimensional embedding.
//! * [`UserDecoder`]: causal transformer over the history of item embeddings,
//!   optionally preceded by a query-id token. Its last position is the
//!   next-interest embedding used for retrieval.
//! * [`TextHead`]: causal LM over target tokens with conditioning vectors
//!   injected as prefix tokens. Used with decoder states as the prefix
//!   (history-conditioned generation) or with the interest embedding alone
//!   (embedding-conditioned reconstruction). Train-only.
//! * [`ConditionalMlp`]: denoiser/velocity network for the visual
//!   reconstruction head. Train-only.

mod attention;
mod block;
pub mod checkpoint;
mod decoder;
mod denoiser;
mod encoder;
mod text_head;

pub use attention::{
    capture_attention, read_records_jsonl, write_records_jsonl, AttentionRecord, AttentionSource, CaptureInput,
    CaptureSelector, RecordError,
};
pub use checkpoint::{CheckpointError, CheckpointFile};
pub use decoder::{DecoderOutput, HistoryInput, UserDecoder};
pub use denoiser::{time_features, ConditionalMlp, Denoiser, HeadRef};
pub use encoder::{EncoderOutput, ItemEncoder};
pub use text_head::TextHead;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, ParamStore, Real, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("history is empty")]
    EmptyHistory,
    #[error("history of {len} items exceeds max_seq {max}")]
    HistoryTooLong { len: usize, max: usize },
    #[error("target of {len} tokens; must be between 1 and {max}")]
    TargetLength { len: usize, max: usize },
    #[error("query id {0} out of range")]
    QueryOutOfRange(u32),
    #[error("selector out of range: {0}")]
    Selector(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub item_len: usize,
    pub num_queries: usize,
    pub visual_dim: usize,
    /// Dimension of item embeddings and of the interest embedding.
    pub embed_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub text_layers: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub visual_hidden: usize,
    pub time_features: usize,
    /// L2-normalize item and interest embeddings so dot product is cosine.
    pub normalize: bool,
    pub use_query: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            item_len: 12,
            num_queries: 64,
            visual_dim: 32,
            embed_dim: 64,
            d_model: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 4,
            text_layers: 2,
            ffn_mult: 4,
            max_seq: 32,
            visual_hidden: 256,
            time_features: 16,
            normalize: true,
            use_query: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("item_len", self.item_len),
            ("num_queries", self.num_queries),
            ("visual_dim", self.visual_dim),
            ("embed_dim", self.embed_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("text_layers", self.text_layers),
            ("ffn_mult", self.ffn_mult),
            ("max_seq", self.max_seq),
            ("visual_hidden", self.visual_hidden),
            ("time_features", self.time_features),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config("d_model must be divisible by heads".into()));
        }
        if !self.time_features.is_multiple_of(2) {
            return Err(ModelError::Config("time_features must be even".into()));
        }
        Ok(())
    }

    /// Longest conditioning prefix the text head accepts: all decoder positions.
    pub fn max_condition(&self) -> usize {
        self.max_seq + 1
    }
}

/// Invocation counts of the train-only heads.
#[derive(Debug, Default)]
pub struct HeadCounters {
    text: AtomicU64,
    visual: AtomicU64,
}

impl HeadCounters {
    pub fn text_calls(&self) -> u64 {
        self.text.load(Ordering::Relaxed)
    }

    pub fn visual_calls(&self) -> u64 {
        self.visual.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.text_calls() + self.visual_calls()
    }

    pub(crate) fn text_counter(&self) -> &AtomicU64 {
        &self.text
    }

    pub(crate) fn visual_counter(&self) -> &AtomicU64 {
        &self.visual
    }
}

impl Clone for HeadCounters {
    fn clone(&self) -> Self {
        Self {
            text: AtomicU64::new(self.text_calls()),
            visual: AtomicU64::new(self.visual_calls()),
        }
    }
}

/// All trainable parameters plus the module layouts that index into them.
#[derive(Debug, Clone)]
pub struct KarmaModel<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub encoder: ItemEncoder,
    pub decoder: UserDecoder,
    pub text: TextHead,
    pub visual: ConditionalMlp,
    counters: HeadCounters,
}

impl<F: Real> KarmaModel<F> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let encoder = ItemEncoder::new(&mut params, &config, &mut rng);
        let decoder = UserDecoder::new(&mut params, &config, &mut rng);
        let text = TextHead::new(&mut params, &config, encoder.token_embedding(), &mut rng);
        let visual = ConditionalMlp::new(
            &mut params,
            "visual",
            config.visual_dim,
            config.embed_dim,
            config.visual_hidden,
            config.time_features,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            text,
            visual,
            counters: HeadCounters::default(),
        })
    }

    pub fn counters(&self) -> &HeadCounters {
        &self.counters
    }

    /// The visual head bound to this model's parameters.
    pub fn visual_head(&self) -> HeadRef<'_, F> {
        HeadRef::new(&self.visual, &self.params, Some(self.counters.visual_counter()))
    }

    /// Embeds items on an inference tape; one `embed_dim` row per item.
    pub fn embed_items(&self, items: &[&[u32]]) -> Result<Vec<Vec<F>>, ModelError> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(256) {
            let mut tape = Tape::inference();
            let e = self.encoder.forward(&mut tape, &self.params, &self.config, chunk)?;
            let d = self.config.embed_dim;
            out.extend(tape.value(e.embeddings).chunks(d).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Interest embedding from explicit history embeddings.
    pub fn interest(&self, history: &[Vec<F>], query: Option<u32>) -> Result<Vec<F>, ModelError> {
        let d = self.config.embed_dim;
        let mut tape = Tape::inference();
        let flat: Vec<F> = history.iter().flat_map(|r| r.iter().copied()).collect();
        if flat.len() != history.len() * d {
            return Err(ModelError::Diff(crate::diffcore::DiffError::Shape {
                op: "interest",
                detail: format!("history rows must have {d} values"),
            }));
        }
        let table = tape.constant(&Tensor::matrix(history.len(), d, flat)?)?;
        let rows: Vec<usize> = (0..history.len()).collect();
        let out = self.decoder.forward(
            &mut tape,
            &self.params,
            &self.config,
            table,
            &[HistoryInput { rows: &rows, query }],
        )?;
        Ok(tape.value(out.interest).to_vec())
    }
}
