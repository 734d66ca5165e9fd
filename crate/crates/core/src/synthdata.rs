//! Synthetic multimodal catalog and user sessions with a known latent topic
//! structure.
//!
//! Each topic owns a contiguous block of "topic terms"; the remaining ids form
//! a shared vocabulary. Users follow a latent intent topic that drifts as a
//! Markov chain, click popular items of the current topic and are shown
//! exposed-but-unclicked items mostly from the same or neighbouring topics.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATA_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_topics: usize,
    pub catalog_size: usize,
    pub vocab_size: usize,
    /// Terms owned by each topic; topic `t` owns ids `[t*k, (t+1)*k)`.
    pub topic_vocab_size: usize,
    pub item_len: usize,
    pub visual_dim: usize,
    /// Per-item norm of the Gaussian perturbation added to the topic centroid.
    pub visual_noise: f64,
    pub num_users: usize,
    pub session_min: usize,
    pub session_max: usize,
    pub drift_prob: f64,
    /// Fraction of each item's tokens drawn from the shared vocabulary.
    pub noise_rate: f64,
    pub exposed_per_step: usize,
    /// Share of exposed-unclicked items drawn from the same or adjacent topics.
    pub hard_fraction: f64,
    pub queries_per_topic: usize,
    /// Probability a query id is drawn uniformly instead of from the intent topic.
    pub query_noise: f64,
    /// Zipf exponent of within-topic item popularity (0 = uniform clicks).
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_topics: 8,
            catalog_size: 2000,
            vocab_size: 512,
            topic_vocab_size: 48,
            item_len: 12,
            visual_dim: 32,
            visual_noise: 0.8,
            num_users: 500,
            session_min: 8,
            session_max: 20,
            drift_prob: 0.15,
            noise_rate: 0.25,
            exposed_per_step: 4,
            hard_fraction: 0.75,
            queries_per_topic: 8,
            query_noise: 0.3,
            popularity_skew: 0.8,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("num_topics", self.num_topics),
            ("catalog_size", self.catalog_size),
            ("vocab_size", self.vocab_size),
            ("topic_vocab_size", self.topic_vocab_size),
            ("item_len", self.item_len),
            ("visual_dim", self.visual_dim),
            ("num_users", self.num_users),
            ("session_min", self.session_min),
            ("exposed_per_step", self.exposed_per_step),
            ("queries_per_topic", self.queries_per_topic),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DataError::Config(format!("{name} must be positive")));
        }
        for (name, p) in [
            ("drift_prob", self.drift_prob),
            ("hard_fraction", self.hard_fraction),
            ("query_noise", self.query_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(0.0..=0.4).contains(&self.noise_rate) {
            return Err(DataError::Config(format!(
                "noise_rate must lie in [0, 0.4] so topic terms stay >= 60%, got {}",
                self.noise_rate
            )));
        }
        if !(self.visual_noise >= 0.0) || !(self.popularity_skew >= 0.0) {
            return Err(DataError::Config(
                "visual_noise and popularity_skew must be >= 0".into(),
            ));
        }
        if self.session_max < self.session_min || self.session_min < 2 {
            return Err(DataError::Config(format!(
                "session length range {}..={} must satisfy 2 <= min <= max",
                self.session_min, self.session_max
            )));
        }
        let owned = self.num_topics * self.topic_vocab_size;
        if self.vocab_size < owned || (self.noise_rate > 0.0 && self.vocab_size == owned) {
            return Err(DataError::Config(format!(
                "vocab_size {} too small for {} topics x {} topic terms plus a shared vocabulary",
                self.vocab_size, self.num_topics, self.topic_vocab_size
            )));
        }
        if self.catalog_size < 2 * self.num_topics {
            return Err(DataError::Config("catalog needs at least two items per topic".into()));
        }
        if self.exposed_per_step >= self.catalog_size {
            return Err(DataError::Config("exposed_per_step must be below catalog_size".into()));
        }
        Ok(())
    }

    pub fn num_queries(&self) -> usize {
        self.num_topics * self.queries_per_topic
    }

    pub fn topic_terms(&self, topic: usize) -> std::ops::Range<u32> {
        let k = self.topic_vocab_size as u32;
        topic as u32 * k..(topic as u32 + 1) * k
    }

    pub fn shared_terms(&self) -> std::ops::Range<u32> {
        (self.num_topics * self.topic_vocab_size) as u32..self.vocab_size as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub item_id: u32,
    pub text_tokens: Vec<u32>,
    pub visual_feature: Vec<f64>,
    /// Latent ground truth, never fed to models.
    pub topic_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub items: Vec<Item>,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub item_len: usize,
    pub visual_dim: usize,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: u32) -> &Item {
        &self.items[id as usize]
    }

    pub fn items_of_topic(&self, topic: u32) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.topic_id == topic)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub query_id: u32,
    pub clicked_item_id: u32,
    pub exposed_unclicked_item_ids: Vec<u32>,
    /// Latent intent topic at this step, ground truth only.
    pub intent_topic: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub user_id: u32,
    pub steps: Vec<Step>,
}

/// One held-out prediction: everything before `step_index` is history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTarget {
    pub user_id: u32,
    pub step_index: usize,
    pub history: Vec<u32>,
    pub query_id: u32,
    pub target: u32,
    pub exposed_unclicked: Vec<u32>,
    pub intent_topic: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub holdout_fraction: f64,
    /// Sessions truncated to their training prefix.
    pub train: Vec<Session>,
    pub eval: Vec<EvalTarget>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Zipf weights over `n` ranks with exponent `s`.
fn zipf(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-s)).collect()
}

pub fn gen_catalog(cfg: &GeneratorConfig) -> Result<Catalog, DataError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 1);
    let t = cfg.num_topics;

    // per-topic term distributions: Zipf over a shuffled term order
    let term_dists: Vec<(Vec<u32>, WeightedIndex<f64>)> = (0..t)
        .map(|topic| {
            let mut terms: Vec<u32> = cfg.topic_terms(topic).collect();
            terms.shuffle(&mut rng);
            let w = WeightedIndex::new(zipf(terms.len(), 0.7)).expect("positive weights");
            (terms, w)
        })
        .collect();
    let shared: Vec<u32> = cfg.shared_terms().collect();

    let centroids: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let mut c: Vec<f64> = (0..cfg.visual_dim).map(|_| rng.sample(StandardNormal)).collect();
            normalize(&mut c);
            c
        })
        .collect();

    let mut topics: Vec<u32> = (0..cfg.catalog_size).map(|i| (i % t) as u32).collect();
    topics.shuffle(&mut rng);

    let noise_tokens = (cfg.noise_rate * cfg.item_len as f64).floor() as usize;
    let noise_scale = cfg.visual_noise / (cfg.visual_dim as f64).sqrt();
    let items = topics
        .into_iter()
        .enumerate()
        .map(|(id, topic)| {
            let (terms, dist) = &term_dists[topic as usize];
            let mut tokens: Vec<u32> = (0..cfg.item_len)
                .map(|k| {
                    if k < noise_tokens {
                        shared[rng.random_range(0..shared.len())]
                    } else {
                        terms[dist.sample(&mut rng)]
                    }
                })
                .collect();
            tokens.shuffle(&mut rng);
            let mut visual: Vec<f64> = centroids[topic as usize]
                .iter()
                .map(|&c| c + noise_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            normalize(&mut visual);
            Item {
                item_id: id as u32,
                text_tokens: tokens,
                visual_feature: visual,
                topic_id: topic,
            }
        })
        .collect();

    Ok(Catalog {
        items,
        num_topics: t,
        vocab_size: cfg.vocab_size,
        item_len: cfg.item_len,
        visual_dim: cfg.visual_dim,
    })
}

pub fn gen_sessions(catalog: &Catalog, cfg: &GeneratorConfig) -> Result<Vec<Session>, DataError> {
    cfg.validate()?;
    if catalog.is_empty() {
        return Err(DataError::Config("catalog is empty".into()));
    }
    let mut rng = stream_rng(cfg.seed, 2);
    let t = catalog.num_topics;

    let by_topic: Vec<Vec<u32>> = (0..t as u32)
        .map(|topic| catalog.items_of_topic(topic).map(|i| i.item_id).collect())
        .collect();
    // popularity: Zipf over a random order of each topic's items
    let popularity: Vec<(Vec<u32>, WeightedIndex<f64>)> = by_topic
        .iter()
        .map(|ids| {
            let mut order = ids.clone();
            order.shuffle(&mut rng);
            let w = WeightedIndex::new(zipf(order.len(), cfg.popularity_skew)).expect("weights");
            (order, w)
        })
        .collect();

    let mut sessions = Vec::with_capacity(cfg.num_users);
    for user in 0..cfg.num_users {
        let len = rng.random_range(cfg.session_min..=cfg.session_max);
        let mut intent = rng.random_range(0..t);
        let mut steps = Vec::with_capacity(len);
        for s in 0..len {
            if s > 0 && t > 1 && rng.random_bool(cfg.drift_prob) {
                let shift = rng.random_range(1..t);
                intent = (intent + shift) % t;
            }
            let query = if rng.random_bool(cfg.query_noise) {
                rng.random_range(0..cfg.num_queries())
            } else {
                intent * cfg.queries_per_topic + rng.random_range(0..cfg.queries_per_topic)
            } as u32;
            let (order, w) = &popularity[intent];
            let clicked = order[w.sample(&mut rng)];

            let mut exposed = Vec::with_capacity(cfg.exposed_per_step);
            let mut attempts = 0;
            while exposed.len() < cfg.exposed_per_step && attempts < 1000 {
                attempts += 1;
                let candidate = if rng.random_bool(cfg.hard_fraction) {
                    let near = match rng.random_range(0..4) {
                        0 | 1 => intent,
                        2 => (intent + 1) % t,
                        _ => (intent + t - 1) % t,
                    };
                    let pool = &by_topic[near];
                    pool[rng.random_range(0..pool.len())]
                } else {
                    rng.random_range(0..catalog.len()) as u32
                };
                if candidate != clicked && !exposed.contains(&candidate) {
                    exposed.push(candidate);
                }
            }
            steps.push(Step {
                query_id: query,
                clicked_item_id: clicked,
                exposed_unclicked_item_ids: exposed,
                intent_topic: intent as u32,
            });
        }
        sessions.push(Session {
            user_id: user as u32,
            steps,
        });
    }
    Ok(sessions)
}

pub fn item_terms(item: &Item) -> BTreeSet<u32> {
    item.text_tokens.iter().copied().collect()
}

/// Jaccard similarity of two term sets; two empty sets count as identical.
pub fn jaccard(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Holds out the last `ceil(fraction * len)` steps of every session (at most
/// `len - 1`, so every eval target has history).
pub fn split_chronological(sessions: &[Session], holdout_fraction: f64) -> Result<Split, DataError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "holdout fraction must lie in (0, 1), got {holdout_fraction}"
        )));
    }
    let mut train = Vec::with_capacity(sessions.len());
    let mut eval = Vec::new();
    for s in sessions {
        let len = s.steps.len();
        if len < 2 {
            return Err(DataError::Split(format!(
                "session of user {} has {len} steps, need at least 2",
                s.user_id
            )));
        }
        let n_eval = ((holdout_fraction * len as f64).ceil() as usize).clamp(1, len - 1);
        let cut = len - n_eval;
        train.push(Session {
            user_id: s.user_id,
            steps: s.steps[..cut].to_vec(),
        });
        for idx in cut..len {
            let st = &s.steps[idx];
            eval.push(EvalTarget {
                user_id: s.user_id,
                step_index: idx,
                history: s.steps[..idx].iter().map(|p| p.clicked_item_id).collect(),
                query_id: st.query_id,
                target: st.clicked_item_id,
                exposed_unclicked: st.exposed_unclicked_item_ids.clone(),
                intent_topic: st.intent_topic,
            });
        }
    }
    Ok(Split {
        holdout_fraction,
        train,
        eval,
    })
}

/// A generated catalog plus sessions and their chronological split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub catalog: Catalog,
    pub sessions: Vec<Session>,
    pub split: Split,
}

impl Dataset {
    pub fn generate(cfg: &GeneratorConfig, holdout_fraction: f64) -> Result<Self, DataError> {
        let catalog = gen_catalog(cfg)?;
        let sessions = gen_sessions(&catalog, cfg)?;
        let split = split_chronological(&sessions, holdout_fraction)?;
        Ok(Self {
            config: cfg.clone(),
            catalog,
            sessions,
            split,
        })
    }
}

// ---- JSONL ------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    catalog: Option<CatalogMeta>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct CatalogMeta {
    num_topics: usize,
    vocab_size: usize,
    item_len: usize,
    visual_dim: usize,
}

const CATALOG_SCHEMA: &str = "karma.catalog";
const SESSIONS_SCHEMA: &str = "karma.sessions";

fn json_line<T: Serialize>(w: &mut impl Write, v: &T) -> Result<(), DataError> {
    serde_json::to_writer(&mut *w, v).map_err(|e| DataError::Io(e.into()))?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_catalog_jsonl(catalog: &Catalog, mut w: impl Write) -> Result<(), DataError> {
    json_line(
        &mut w,
        &Header {
            schema: CATALOG_SCHEMA.into(),
            schema_version: DATA_SCHEMA_VERSION,
            catalog: Some(CatalogMeta {
                num_topics: catalog.num_topics,
                vocab_size: catalog.vocab_size,
                item_len: catalog.item_len,
                visual_dim: catalog.visual_dim,
            }),
        },
    )?;
    for item in &catalog.items {
        json_line(&mut w, item)?;
    }
    Ok(())
}

pub fn write_sessions_jsonl(sessions: &[Session], mut w: impl Write) -> Result<(), DataError> {
    json_line(
        &mut w,
        &Header {
            schema: SESSIONS_SCHEMA.into(),
            schema_version: DATA_SCHEMA_VERSION,
            catalog: None,
        },
    )?;
    for s in sessions {
        json_line(&mut w, s)?;
    }
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse { line, msg: msg.into() }
}

fn read_header(
    lines: &mut impl Iterator<Item = (usize, std::io::Result<String>)>,
    schema: &str,
) -> Result<Header, DataError> {
    let (n, first) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let first = first?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(n, e.to_string()))?;
    if header.schema != schema {
        return Err(parse_err(
            n,
            format!("expected schema {schema}, found {}", header.schema),
        ));
    }
    if header.schema_version != DATA_SCHEMA_VERSION {
        return Err(parse_err(
            n,
            format!(
                "unsupported schema version {} (expected {DATA_SCHEMA_VERSION})",
                header.schema_version
            ),
        ));
    }
    Ok(header)
}

/// Parses and validates a catalog file: ids must be dense and in order,
/// tokens in range, visual features finite with unit norm.
pub fn read_catalog_jsonl(r: impl BufRead) -> Result<Catalog, DataError> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = read_header(&mut lines, CATALOG_SCHEMA)?;
    let meta = header
        .catalog
        .ok_or_else(|| parse_err(1, "catalog header lacks metadata"))?;
    if meta.num_topics == 0 || meta.item_len == 0 || meta.visual_dim == 0 || meta.vocab_size == 0 {
        return Err(parse_err(1, "catalog metadata must be positive"));
    }
    let mut items = Vec::new();
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        if item.item_id as usize != items.len() {
            return Err(parse_err(n, format!("item id {} out of sequence", item.item_id)));
        }
        if item.text_tokens.len() != meta.item_len {
            return Err(parse_err(n, "text length differs from header"));
        }
        if item.text_tokens.iter().any(|&t| t as usize >= meta.vocab_size) {
            return Err(parse_err(n, "token id out of vocabulary"));
        }
        if item.visual_feature.len() != meta.visual_dim {
            return Err(parse_err(n, "visual feature dimension differs from header"));
        }
        let norm = item.visual_feature.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(parse_err(n, "visual feature must have unit L2 norm"));
        }
        if item.topic_id as usize >= meta.num_topics {
            return Err(parse_err(n, "topic id out of range"));
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(parse_err(1, "catalog has no items"));
    }
    Ok(Catalog {
        items,
        num_topics: meta.num_topics,
        vocab_size: meta.vocab_size,
        item_len: meta.item_len,
        visual_dim: meta.visual_dim,
    })
}

/// Parses sessions and checks them against `catalog_size`.
pub fn read_sessions_jsonl(r: impl BufRead, catalog_size: usize) -> Result<Vec<Session>, DataError> {
    let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
    read_header(&mut lines, SESSIONS_SCHEMA)?;
    let mut sessions = Vec::new();
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Session = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        validate_session(&s, catalog_size).map_err(|m| parse_err(n, m))?;
        sessions.push(s);
    }
    Ok(sessions)
}

pub fn validate_session(s: &Session, catalog_size: usize) -> Result<(), String> {
    if s.steps.is_empty() {
        return Err("session has no steps".into());
    }
    for (i, st) in s.steps.iter().enumerate() {
        if st.clicked_item_id as usize >= catalog_size {
            return Err(format!("step {i}: clicked item out of catalog"));
        }
        if st.exposed_unclicked_item_ids.is_empty() {
            return Err(format!("step {i}: no exposed-unclicked items"));
        }
        if st
            .exposed_unclicked_item_ids
            .iter()
            .any(|&e| e as usize >= catalog_size)
        {
            return Err(format!("step {i}: exposed item out of catalog"));
        }
        if st.exposed_unclicked_item_ids.contains(&st.clicked_item_id) {
            return Err(format!("step {i}: clicked item listed as unclicked"));
        }
    }
    Ok(())
}
