use rand::Rng;

use super::block::{normal, Block, LayerNorm, Linear};
use super::{ModelConfig, ModelError};
use crate::diffcore::{AttnSpec, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// One history sequence: rows of an item-embedding table in chronological
/// order, plus the current query when query conditioning is enabled.
#[derive(Debug, Clone, Copy)]
pub struct HistoryInput<'a> {
    pub rows: &'a [usize],
    pub query: Option<u32>,
}

/// Decoder states for a batch of left-padded sequences.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[batch * seq, embed_dim]`, padded rows included (they carry no signal).
    pub states: Var,
    /// `[batch, embed_dim]`: the last position of each sequence.
    pub interest: Var,
    pub seq: usize,
    pub pad: Vec<usize>,
    pub attention: Vec<Var>,
}

impl DecoderOutput {
    /// State rows belonging to sequence `b`, in order.
    pub fn valid_rows(&self, b: usize) -> std::ops::Range<usize> {
        b * self.seq + self.pad[b]..(b + 1) * self.seq
    }
}

/// `D_theta`: causal transformer over history item embeddings.
#[derive(Debug, Clone)]
pub struct UserDecoder {
    adapter: Linear,
    queries: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
}

impl UserDecoder {
    pub(crate) fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let adapter = Linear::new(store, "dec.adapter", cfg.embed_dim, cfg.d_model, 0.02 * 4.0, rng);
        let queries = store.add("dec.query", normal(rng, vec![cfg.num_queries, cfg.d_model], 0.02));
        let positions = store.add("dec.pos", normal(rng, vec![cfg.max_seq + 1, cfg.d_model], 0.02));
        let blocks = (0..cfg.decoder_layers)
            .map(|l| {
                Block::new(
                    store,
                    &format!("dec.block{l}"),
                    cfg.d_model,
                    cfg.heads,
                    cfg.ffn_mult,
                    cfg.decoder_layers,
                    rng,
                )
            })
            .collect();
        let ln_f = LayerNorm::new(store, "dec.ln_f", cfg.d_model);
        let out = Linear::new(store, "dec.out", cfg.d_model, cfg.embed_dim, 0.02, rng);
        Self {
            adapter,
            queries,
            positions,
            blocks,
            ln_f,
            out,
        }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<F: Real>(
        &self,
        t: &mut Tape<F>,
        s: &ParamStore<F>,
        cfg: &ModelConfig,
        table: Var,
        inputs: &[HistoryInput<'_>],
    ) -> Result<DecoderOutput, ModelError> {
        let table_rows = t.dims(table).0;
        let mut lens = Vec::with_capacity(inputs.len());
        for h in inputs {
            if h.rows.is_empty() {
                return Err(ModelError::EmptyHistory);
            }
            if h.rows.len() > cfg.max_seq {
                return Err(ModelError::HistoryTooLong {
                    len: h.rows.len(),
                    max: cfg.max_seq,
                });
            }
            if let Some(&r) = h.rows.iter().find(|&&r| r >= table_rows) {
                return Err(ModelError::Diff(crate::diffcore::DiffError::Shape {
                    op: "decoder",
                    detail: format!("history row {r} of {table_rows}"),
                }));
            }
            let query = match h.query {
                Some(q) if cfg.use_query => {
                    if q as usize >= cfg.num_queries {
                        return Err(ModelError::QueryOutOfRange(q));
                    }
                    1
                }
                _ => 0,
            };
            lens.push(h.rows.len() + query);
        }
        let seq = lens.iter().copied().max().unwrap_or(0);
        let pad: Vec<usize> = lens.iter().map(|&l| seq - l).collect();

        // Rows of `parts` = [adapted items | query embeddings | zero row].
        let item_rows: Vec<usize> = inputs.iter().flat_map(|h| h.rows.iter().copied()).collect();
        let query_ids: Vec<usize> = inputs
            .iter()
            .filter_map(|h| h.query.filter(|_| cfg.use_query).map(|q| q as usize))
            .collect();
        let n_items = item_rows.len();
        let zero_row = n_items + query_ids.len();
        let mut layout = Vec::with_capacity(inputs.len() * seq);
        let mut positions = Vec::with_capacity(inputs.len() * seq);
        let (mut item_at, mut query_at) = (0, n_items);
        for (b, h) in inputs.iter().enumerate() {
            layout.extend(std::iter::repeat_n(zero_row, pad[b]));
            positions.extend(std::iter::repeat_n(0, pad[b]));
            let mut p = 0;
            if h.query.is_some() && cfg.use_query {
                layout.push(query_at);
                query_at += 1;
                positions.push(p);
                p += 1;
            }
            for _ in h.rows {
                layout.push(item_at);
                item_at += 1;
                positions.push(p);
                p += 1;
            }
        }

        let e = t.gather_rows(table, &item_rows)?;
        let items = self.adapter.forward(t, s, e)?;
        let mut parts = vec![items];
        if !query_ids.is_empty() {
            let qt = t.param(s, self.queries)?;
            parts.push(t.gather_rows(qt, &query_ids)?);
        }
        parts.push(t.constant(&Tensor::zeros(vec![1, cfg.d_model]))?);
        let all = t.concat_rows(&parts)?;
        let x = t.gather_rows(all, &layout)?;
        let pe = t.param(s, self.positions)?;
        let p = t.gather_rows(pe, &positions)?;
        let mut x = t.add(x, p)?;

        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let spec = AttnSpec::new(inputs.len(), seq, b.heads, true).with_padding(pad.clone());
            let (y, a) = b.forward(t, s, x, spec)?;
            x = y;
            attention.push(a);
        }
        let x = self.ln_f.forward(t, s, x)?;
        let mut states = self.out.forward(t, s, x)?;
        if cfg.normalize {
            states = t.l2_normalize_rows(states)?;
        }
        let last: Vec<usize> = (0..inputs.len()).map(|b| b * seq + seq - 1).collect();
        let interest = t.gather_rows(states, &last)?;
        Ok(DecoderOutput {
            states,
            interest,
            seq,
            pad,
            attention,
        })
    }
}
