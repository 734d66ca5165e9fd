use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::model::{capture_attention, AttentionRecord, AttentionSource, CaptureInput, CaptureSelector, KarmaModel};

const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkEntry {
    pub source: AttentionSource,
    pub layer: usize,
    pub head: usize,
    /// Mean over query rows of the largest attention weight.
    pub mean_max_mass: f64,
    /// Mean over query rows of the row entropy (nats).
    pub mean_entropy: f64,
    /// Gini coefficient of the mass each key receives, averaged over samples.
    pub gini: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SinkProfile {
    pub entries: Vec<SinkEntry>,
}

impl SinkProfile {
    pub fn mean_max_mass(&self) -> f64 {
        if self.entries.is_empty() {
            return f64::NAN;
        }
        self.entries.iter().map(|e| e.mean_max_mass).sum::<f64>() / self.entries.len() as f64
    }
}

fn gini(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    // Sorted form of sum_ij |x_i - x_j| / (2 n^2 mean).
    let weighted: f64 = s
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * (i as f64 + 1.0) - n - 1.0) * v)
        .sum();
    weighted / (n * n * mean)
}

/// Summaries per (source, layer, head); rows are averaged within a record,
/// records are averaged with equal weight.
pub fn sink_profile(records: &[AttentionRecord]) -> Result<SinkProfile, EvalError> {
    let mut acc: BTreeMap<(u8, usize, usize), (AttentionSource, f64, f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let n = r.rows.len();
        if n == 0 {
            return Err(EvalError::NonStochastic("empty attention matrix".into()));
        }
        let mut col = vec![0.0; n];
        let (mut mx, mut ent) = (0.0, 0.0);
        for (i, row) in r.rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != n || row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(EvalError::NonStochastic(format!(
                    "layer {} head {} sample {} row {i}",
                    r.layer, r.head, r.sample
                )));
            }
            mx += row.iter().copied().fold(0.0, f64::max);
            ent -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            for (c, p) in col.iter_mut().zip(row) {
                *c += p;
            }
        }
        let src = match r.source {
            AttentionSource::ItemEncoder => 0,
            AttentionSource::UserDecoder => 1,
        };
        let e = acc
            .entry((src, r.layer, r.head))
            .or_insert((r.source, 0.0, 0.0, 0.0, 0));
        e.1 += mx / n as f64;
        e.2 += ent / n as f64;
        e.3 += gini(&col);
        e.4 += 1;
    }
    Ok(SinkProfile {
        entries: acc
            .into_iter()
            .map(|((_, layer, head), (source, mx, ent, g, k))| SinkEntry {
                source,
                layer,
                head,
                mean_max_mass: mx / k as f64,
                mean_entropy: ent / k as f64,
                gini: g / k as f64,
                samples: k,
            })
            .collect(),
    })
}

/// Sweeps every item-encoder layer and head over `items`.
pub fn encoder_sink_profile(model: &KarmaModel<f32>, items: &[&[u32]]) -> Result<SinkProfile, EvalError> {
    let records = capture_attention(model, &CaptureInput::Items(items), &CaptureSelector::all())?;
    sink_profile(&records)
}

/// Binary PGM (P5) of one attention matrix, weight 1 mapped to 255.
pub fn write_pgm(record: &AttentionRecord, mut w: impl Write) -> Result<(), EvalError> {
    let n = record.rows.len();
    write!(w, "P5\n{n} {n}\n255\n")?;
    let bytes: Vec<u8> = record
        .rows
        .iter()
        .flat_map(|r| r.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}
