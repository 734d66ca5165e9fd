//! Retrieval metrics, attention-sink diagnostics and the generator
//! comparison. Evaluation never touches the train-only heads.

mod generators;
mod metrics;
mod sink;

pub use generators::{
    compare_generators, train_generator_head, CompareConfig, GeneratorReport, HeadTrainConfig, TrainedHead,
};
pub use metrics::{gauc, hr_at_k, js_at_k, retrieve_topk, GaucResult, Impression, RetrievalRun};
pub use sink::{encoder_sink_profile, sink_profile, write_pgm, SinkEntry, SinkProfile};

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Tape, Tensor};
use crate::model::{HistoryInput, KarmaModel, ModelError};
use crate::objectives::ObjectiveError;
use crate::synthdata::{Catalog, EvalTarget};
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("K = {k} exceeds the ranking length {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("attention row is not stochastic: {0}")]
    NonStochastic(String),
    #[error("embedding dimension mismatch: {0}")]
    Dim(String),
    #[error("no evaluation targets")]
    NoTargets,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub hr_ks: Vec<usize>,
    pub js_ks: Vec<usize>,
    /// Decoder inference batch.
    pub batch: usize,
    /// Catalog items fed to the encoder for the sink profile (0 = skip).
    pub sink_items: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            hr_ks: vec![10, 50, 200],
            js_ks: vec![10, 50],
            batch: 64,
            sink_items: 64,
        }
    }
}

pub const JS_DEFINITION: &str = "per-item-mean-jaccard";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub step: usize,
    pub targets: usize,
    pub hr: BTreeMap<usize, f64>,
    /// `None` when no user has both a click and an unclicked impression.
    pub gauc: Option<f64>,
    pub js: BTreeMap<usize, f64>,
    pub js_definition: String,
    /// Mean over (layer, head) of the item encoder's mean max row mass.
    pub sink_max_mass: Option<f64>,
    pub sink: Option<SinkProfile>,
    /// Train-only head invocations during this evaluation; always 0.
    pub head_calls: u64,
}

impl MetricsReport {
    pub fn csv_header(hr_ks: &[usize], js_ks: &[usize]) -> String {
        let mut cols = vec!["variant".to_string(), "seed".into(), "step".into(), "targets".into()];
        cols.extend(hr_ks.iter().map(|k| format!("hr@{k}")));
        cols.push("gauc".into());
        cols.extend(js_ks.iter().map(|k| format!("js@{k}")));
        cols.push("sink_max_mass".into());
        cols.push("head_calls".into());
        cols.join(",")
    }

    /// Row matching [`MetricsReport::csv_header`] for the report's own K lists.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        let mut cells = vec![
            self.variant.clone(),
            self.seed.to_string(),
            self.step.to_string(),
            self.targets.to_string(),
        ];
        cells.extend(self.hr.values().map(|v| v.to_string()));
        cells.push(opt(self.gauc));
        cells.extend(self.js.values().map(|v| v.to_string()));
        cells.push(opt(self.sink_max_mass));
        cells.push(self.head_calls.to_string());
        cells.join(",")
    }

    pub fn write_csv(reports: &[MetricsReport], mut w: impl Write) -> Result<(), EvalError> {
        if let Some(first) = reports.first() {
            let hr: Vec<usize> = first.hr.keys().copied().collect();
            let js: Vec<usize> = first.js.keys().copied().collect();
            writeln!(w, "{}", Self::csv_header(&hr, &js))?;
            for r in reports {
                writeln!(w, "{}", r.csv_row())?;
            }
        }
        Ok(())
    }
}

/// Catalog item embeddings, one row per item id.
pub fn item_embeddings(model: &KarmaModel<f32>, catalog: &Catalog) -> Result<Vec<Vec<f32>>, EvalError> {
    if catalog.is_empty() {
        return Err(EvalError::EmptyCatalog);
    }
    let items: Vec<&[u32]> = catalog.items.iter().map(|i| i.text_tokens.as_slice()).collect();
    Ok(model.embed_items(&items)?)
}

/// `h_t` for each `(history, query)` from the most recent `max_seq` clicks.
pub fn interest_embeddings(
    model: &KarmaModel<f32>,
    items: &[Vec<f32>],
    histories: &[(&[u32], u32)],
    batch: usize,
) -> Result<Vec<Vec<f32>>, EvalError> {
    let d = model.config.embed_dim;
    let flat: Vec<f32> = items.iter().flat_map(|r| r.iter().copied()).collect();
    let table = Tensor::matrix(items.len(), d, flat).map_err(ModelError::from)?;
    let mut out = Vec::with_capacity(histories.len());
    for chunk in histories.chunks(batch.max(1)) {
        let mut t = Tape::inference();
        let tv = t.constant(&table).map_err(ModelError::from)?;
        let rows: Vec<Vec<usize>> = chunk
            .iter()
            .map(|(h, _)| {
                let from = h.len().saturating_sub(model.config.max_seq);
                h[from..].iter().map(|&i| i as usize).collect()
            })
            .collect();
        let inputs: Vec<HistoryInput<'_>> = chunk
            .iter()
            .zip(&rows)
            .map(|((_, q), r)| HistoryInput {
                rows: r,
                query: Some(*q),
            })
            .collect();
        let dec = model
            .decoder
            .forward(&mut t, &model.params, &model.config, tv, &inputs)?;
        out.extend(t.value(dec.interest).chunks(d).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Full evaluation on held-out targets: HR@K, gAUC over each user's
/// impressions, JS@K and the item-encoder sink profile.
pub fn evaluate(
    model: &KarmaModel<f32>,
    catalog: &Catalog,
    targets: &[EvalTarget],
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    if targets.is_empty() {
        return Err(EvalError::NoTargets);
    }
    let calls_before = model.counters().total();
    let items = item_embeddings(model, catalog)?;
    let hist: Vec<(&[u32], u32)> = targets.iter().map(|e| (e.history.as_slice(), e.query_id)).collect();
    let hs = interest_embeddings(model, &items, &hist, opts.batch)?;
    let mut report = score_queries(&hs, &items, catalog, targets, opts)?;
    if opts.sink_items > 0 {
        let sample: Vec<&[u32]> = catalog
            .items
            .iter()
            .take(opts.sink_items)
            .map(|i| i.text_tokens.as_slice())
            .collect();
        let sink = encoder_sink_profile(model, &sample)?;
        report.sink_max_mass = Some(sink.mean_max_mass());
        report.sink = Some(sink);
    }
    report.head_calls = model.counters().total() - calls_before;
    Ok(report)
}

/// Retrieval metrics for one query embedding per target.
pub fn score_queries(
    hs: &[Vec<f32>],
    items: &[Vec<f32>],
    catalog: &Catalog,
    targets: &[EvalTarget],
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    if targets.is_empty() {
        return Err(EvalError::NoTargets);
    }
    let kmax = opts.hr_ks.iter().chain(&opts.js_ks).copied().max().unwrap_or(1);
    let runs = hs
        .iter()
        .zip(targets)
        .map(|(h, e)| {
            let (ranked, scores) = retrieve_topk(h, items, kmax)?.into_iter().unzip();
            Ok(RetrievalRun {
                target: e.target,
                ranked,
                scores,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let mut hr = BTreeMap::new();
    for &k in &opts.hr_ks {
        hr.insert(k, hr_at_k(&runs, k)?);
    }
    let mut js = BTreeMap::new();
    for &k in &opts.js_ks {
        js.insert(k, js_at_k(&runs, k, catalog)?);
    }
    let mut sessions: BTreeMap<u32, Vec<Impression>> = BTreeMap::new();
    for (h, e) in hs.iter().zip(targets) {
        let s = sessions.entry(e.user_id).or_default();
        let score = |id: u32| dot(h, &items[id as usize]);
        s.push(Impression {
            score: score(e.target),
            clicked: true,
        });
        s.extend(e.exposed_unclicked.iter().map(|&n| Impression {
            score: score(n),
            clicked: false,
        }));
    }
    let sessions: Vec<Vec<Impression>> = sessions.into_values().collect();
    Ok(MetricsReport {
        variant: String::new(),
        seed: 0,
        step: 0,
        targets: targets.len(),
        hr,
        gauc: gauc(&sessions).value,
        js,
        js_definition: JS_DEFINITION.into(),
        sink_max_mass: None,
        sink: None,
        head_calls: 0,
    })
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}
