use rand::Rng;

use super::block::{normal, Block, LayerNorm, Linear};
use super::{ModelConfig, ModelError};
use crate::diffcore::{AttnSpec, ParamId, ParamStore, Real, Tape, Var};

/// `E_phi`: item tokens -> one embedding.
#[derive(Debug, Clone)]
pub struct ItemEncoder {
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    proj: Linear,
}

pub struct EncoderOutput {
    /// `[items, embed_dim]`
    pub embeddings: Var,
    /// One attention node per layer, `[items * item_len]` rows.
    pub attention: Vec<Var>,
}

impl ItemEncoder {
    pub(crate) fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let tokens = store.add("enc.tok", normal(rng, vec![cfg.vocab_size, cfg.d_model], 0.02));
        let positions = store.add("enc.pos", normal(rng, vec![cfg.item_len, cfg.d_model], 0.02));
        let blocks = (0..cfg.encoder_layers)
            .map(|l| {
                Block::new(
                    store,
                    &format!("enc.block{l}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.ffn_mult,
                    cfg.encoder_layers,
                    rng,
                )
            })
            .collect();
        let ln_f = LayerNorm::new(store, "enc.ln_f", cfg.d_model);
        let proj = Linear::new(store, "enc.proj", cfg.d_model, cfg.embed_dim, 0.02, rng);
        Self {
            tokens,
            positions,
            blocks,
            ln_f,
            proj,
        }
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tokens
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_prefix() -> &'static str {
        "enc."
    }

    pub fn forward<F: Real>(
        &self,
        t: &mut Tape<F>,
        s: &ParamStore<F>,
        cfg: &ModelConfig,
        items: &[&[u32]],
    ) -> Result<EncoderOutput, ModelError> {
        let len = cfg.item_len;
        let mut ids = Vec::with_capacity(items.len() * len);
        for tokens in items {
            if tokens.len() != len {
                return Err(ModelError::TargetLength {
                    len: tokens.len(),
                    max: len,
                });
            }
            for &tok in *tokens {
                if tok as usize >= cfg.vocab_size {
                    return Err(ModelError::TokenOutOfRange {
                        token: tok,
                        vocab: cfg.vocab_size,
                    });
                }
                ids.push(tok as usize);
            }
        }
        let pos: Vec<usize> = (0..items.len()).flat_map(|_| 0..len).collect();
        let tok = t.param(s, self.tokens)?;
        let pe = t.param(s, self.positions)?;
        let x = t.gather_rows(tok, &ids)?;
        let p = t.gather_rows(pe, &pos)?;
        let mut x = t.add(x, p)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let spec = AttnSpec::new(items.len(), len, b.heads, false);
            let (y, a) = b.forward(t, s, x, spec)?;
            x = y;
            attention.push(a);
        }
        let x = self.ln_f.forward(t, s, x)?;
        let pooled = t.segment_mean(x, len)?;
        let mut e = self.proj.forward(t, s, pooled)?;
        if cfg.normalize {
            e = t.l2_normalize_rows(e)?;
        }
        Ok(EncoderOutput {
            embeddings: e,
            attention,
        })
    }
}
