use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::decoder::HistoryInput;
use super::{KarmaModel, ModelError};
use crate::diffcore::{Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionSource {
    ItemEncoder,
    UserDecoder,
}

/// One attention matrix for one (sample, layer, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionRecord {
    pub source: AttentionSource,
    pub sample: usize,
    pub layer: usize,
    pub head: usize,
    /// Square, row-stochastic.
    pub rows: Vec<Vec<f64>>,
}

pub enum CaptureInput<'a> {
    /// Item token sequences, one record set per item.
    Items(&'a [&'a [u32]]),
    /// One history (item token sequences in order) and an optional query.
    History { items: &'a [&'a [u32]], query: Option<u32> },
}

/// `None` selects every layer / head.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptureSelector {
    pub layers: Option<Vec<usize>>,
    pub heads: Option<Vec<usize>>,
}

impl CaptureSelector {
    pub fn all() -> Self {
        Self::default()
    }

    fn resolve(&self, layers: usize, heads: usize) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
        let pick = |sel: &Option<Vec<usize>>, n: usize, what: &str| match sel {
            None => Ok((0..n).collect()),
            Some(v) => match v.iter().find(|&&i| i >= n) {
                Some(i) => Err(ModelError::Selector(format!("{what} {i} of {n}"))),
                None => Ok(v.clone()),
            },
        };
        Ok((pick(&self.layers, layers, "layer")?, pick(&self.heads, heads, "head")?))
    }
}

/// Attention probabilities of the selected layers and heads, computed on an
/// inference tape (no gradient state is touched).
pub fn capture_attention<F: Real>(
    model: &KarmaModel<F>,
    input: &CaptureInput<'_>,
    selector: &CaptureSelector,
) -> Result<Vec<AttentionRecord>, ModelError> {
    let cfg = &model.config;
    let mut tape = Tape::<F>::inference();
    let (source, nodes, layers) = match input {
        CaptureInput::Items(items) => {
            let out = model.encoder.forward(&mut tape, &model.params, cfg, items)?;
            (AttentionSource::ItemEncoder, out.attention, model.encoder.layers())
        }
        CaptureInput::History { items, query } => {
            let enc = model.encoder.forward(&mut tape, &model.params, cfg, items)?;
            let rows: Vec<usize> = (0..items.len()).collect();
            let out = model.decoder.forward(
                &mut tape,
                &model.params,
                cfg,
                enc.embeddings,
                &[HistoryInput {
                    rows: &rows,
                    query: *query,
                }],
            )?;
            (AttentionSource::UserDecoder, out.attention, model.decoder.layers())
        }
    };
    let (layer_ids, head_ids) = selector.resolve(layers, cfg.heads)?;
    let mut records = Vec::new();
    for &l in &layer_ids {
        collect(&tape, nodes[l], source, l, &head_ids, &mut records);
    }
    records.sort_by_key(|r| (r.sample, r.layer, r.head));
    Ok(records)
}

fn collect<F: Real>(
    tape: &Tape<F>,
    node: Var,
    source: AttentionSource,
    layer: usize,
    heads: &[usize],
    out: &mut Vec<AttentionRecord>,
) {
    let (spec, probs) = tape.attention_probs(node).expect("block returns its attention node");
    let t = spec.seq;
    for b in 0..spec.batch {
        let pad = spec.pad_left[b];
        for &h in heads {
            let base = (b * spec.heads + h) * t * t;
            let rows = (pad..t)
                .map(|i| {
                    (pad..t)
                        .map(|j| probs[base + i * t + j].to_f64().unwrap_or(f64::NAN))
                        .collect()
                })
                .collect();
            out.push(AttentionRecord {
                source,
                sample: b,
                layer,
                head: h,
                rows,
            });
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AttentionRecord {
    /// Checks shape, row sums (within `tol`) and, for decoder records, causality.
    pub fn validate(&self, tol: f64) -> Result<(), String> {
        let n = self.rows.len();
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != n {
                return Err(format!("row {i} has {} entries, expected {n}", row.len()));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(format!("row {i} has a negative or non-finite weight"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(format!("row {i} sums to {s}"));
            }
            if self.source == AttentionSource::UserDecoder && row[i + 1..].iter().any(|&p| p != 0.0) {
                return Err(format!("row {i} attends to a future position"));
            }
        }
        Ok(())
    }
}

/// One JSON record per line.
pub fn write_records_jsonl<W: Write>(mut w: W, records: &[AttentionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(r: R) -> Result<Vec<AttentionRecord>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttentionRecord = serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate(1e-6)
            .map_err(|msg| RecordError::Parse { line: i + 1, msg })?;
        out.push(rec);
    }
    Ok(out)
}
