use std::ops::Range;
use std::sync::atomic::Ordering;

use rand::Rng;

use super::block::{normal, Block, LayerNorm, Linear};
use super::{KarmaModel, ModelConfig, ModelError};
use crate::diffcore::{AttnSpec, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Causal LM over item text, conditioned through prefix tokens.
///
/// The sequence for one example is `[c_1 .. c_k, w_1 .. w_{L-1}]`; the output
/// at position `k - 1 + l` predicts `w_{l+1}`. The conditioning vectors are
/// the only path from anything outside the target text into the logits.
#[derive(Debug, Clone)]
pub struct TextHead {
    /// Shared with the item encoder.
    tokens: ParamId,
    cond: Linear,
    positions: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    vocab: Linear,
}

impl TextHead {
    pub(crate) fn new<F: Real>(
        store: &mut ParamStore<F>,
        cfg: &ModelConfig,
        tokens: ParamId,
        rng: &mut impl Rng,
    ) -> Self {
        let cond = Linear::new(store, "text.cond", cfg.embed_dim, cfg.d_model, 0.02 * 4.0, rng);
        let positions = store.add(
            "text.pos",
            normal(rng, vec![cfg.max_condition() + cfg.item_len, cfg.d_model], 0.02),
        );
        let blocks = (0..cfg.text_layers)
            .map(|l| {
                Block::new(
                    store,
                    &format!("text.block{l}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.ffn_mult,
                    cfg.text_layers,
                    rng,
                )
            })
            .collect();
        let ln_f = LayerNorm::new(store, "text.ln_f", cfg.d_model);
        let vocab = Linear::new(store, "text.vocab", cfg.d_model, cfg.vocab_size, 0.02, rng);
        Self {
            tokens,
            cond,
            positions,
            blocks,
            ln_f,
            vocab,
        }
    }

    /// Teacher-forced logits `[batch * L, vocab]` for `targets` (all of equal
    /// length `L`). Example `b` is conditioned on rows `groups[b]` of `cond`.
    pub fn forward<F: Real>(
        &self,
        t: &mut Tape<F>,
        s: &ParamStore<F>,
        cfg: &ModelConfig,
        cond: Var,
        groups: &[Range<usize>],
        targets: &[&[u32]],
    ) -> Result<Var, ModelError> {
        if groups.len() != targets.len() {
            return Err(ModelError::Config("one conditioning group per target required".into()));
        }
        let len = targets.first().map_or(0, |x| x.len());
        if len == 0 || len > cfg.item_len || targets.iter().any(|x| x.len() != len) {
            return Err(ModelError::TargetLength { len, max: cfg.item_len });
        }
        for tok in targets.iter().flat_map(|x| x.iter()) {
            if *tok as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: *tok,
                    vocab: cfg.vocab_size,
                });
            }
        }
        let max_c = groups.iter().map(|g| g.len()).max().unwrap_or(0);
        if max_c == 0 || max_c > cfg.max_condition() || groups.iter().any(|g| g.is_empty()) {
            return Err(ModelError::Config(format!(
                "each example needs 1..={} conditioning vectors",
                cfg.max_condition()
            )));
        }
        let seq = max_c + len - 1;
        let batch = targets.len();

        let cond_rows: Vec<usize> = groups.iter().flat_map(|g| g.clone()).collect();
        let tok_ids: Vec<usize> = targets
            .iter()
            .flat_map(|x| x[..len - 1].iter().map(|&w| w as usize))
            .collect();
        let n_cond = cond_rows.len();
        let zero_row = n_cond + tok_ids.len();

        let mut layout = Vec::with_capacity(batch * seq);
        let mut positions = Vec::with_capacity(batch * seq);
        let mut pad = Vec::with_capacity(batch);
        let mut c_at = 0;
        for (b, g) in groups.iter().enumerate() {
            let p = max_c - g.len();
            pad.push(p);
            layout.extend(std::iter::repeat_n(zero_row, p));
            positions.extend(std::iter::repeat_n(0, p));
            for k in 0..g.len() {
                layout.push(c_at);
                c_at += 1;
                positions.push(k);
            }
            for l in 0..len - 1 {
                layout.push(n_cond + b * (len - 1) + l);
                positions.push(g.len() + l);
            }
        }

        let c = t.gather_rows(cond, &cond_rows)?;
        let c = self.cond.forward(t, s, c)?;
        let tok = t.param(s, self.tokens)?;
        let w = t.gather_rows(tok, &tok_ids)?;
        let z = t.constant(&Tensor::zeros(vec![1, cfg.d_model]))?;
        let all = t.concat_rows(&[c, w, z])?;
        let x = t.gather_rows(all, &layout)?;
        let pe = t.param(s, self.positions)?;
        let p = t.gather_rows(pe, &positions)?;
        let mut x = t.add(x, p)?;
        for blk in &self.blocks {
            let spec = AttnSpec::new(batch, seq, blk.heads, true).with_padding(pad.clone());
            x = blk.forward(t, s, x, spec)?.0;
        }
        let picks: Vec<usize> = (0..batch)
            .flat_map(|b| (0..len).map(move |l| b * seq + max_c - 1 + l))
            .collect();
        let x = t.gather_rows(x, &picks)?;
        let x = self.ln_f.forward(t, s, x)?;
        Ok(self.vocab.forward(t, s, x)?)
    }
}

impl<F: Real> KarmaModel<F> {
    /// Text-head logits conditioned on rows of `cond` (history states or
    /// interest embeddings). Counts as one text-head invocation.
    pub fn text_logits(
        &self,
        t: &mut Tape<F>,
        cond: Var,
        groups: &[Range<usize>],
        targets: &[&[u32]],
    ) -> Result<Var, ModelError> {
        self.counters().text_counter().fetch_add(1, Ordering::Relaxed);
        self.text.forward(t, &self.params, &self.config, cond, groups, targets)
    }
}
