use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::batch::{build_examples, sample_negatives, BatchTarget, Example};
use super::{stream_seed, ActionLoss, ImgObjective, TrainConfig, TrainError};
use crate::diffcore::{AdamW, DiffError, Tape, Tensor};
use crate::model::{CheckpointError, CheckpointFile, HistoryInput, KarmaModel, ModelConfig, ModelError};
use crate::objectives::{
    ddpm_loss, edm_loss, fm_loss, gen_loss, info_nce_loss, karma_loss, pairwise_ce_loss, recon_loss, DdpmSchedule,
    EdmConfig, LossBreakdown, LossParts, ObjectiveError,
};
use crate::synthdata::{Catalog, Session};

const TAG_ORDER: u64 = 1;
const TAG_NEG: u64 = 2;
const TAG_IMG: u64 = 3;

pub const LOG_HEADER: &str = "stage,step,act,gen,recon,img,total";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Warmup,
    Joint,
    Done,
}

impl Stage {
    fn id(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Done => "done",
        })
    }
}

/// Position of the next step to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// No example had a negative, so no update was made.
    pub skipped: bool,
}

impl StepRecord {
    /// One line matching [`LOG_HEADER`]. Warm-up loss is reported as `recon`.
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.stage, self.step, l.act, l.gen, l.recon, l.img, l.total
        )
    }
}

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub model: KarmaModel<f32>,
    opt: AdamW<f32>,
    state: TrainState,
    catalog: &'d Catalog,
    examples: Vec<Example>,
    warm_items: Vec<u32>,
    fingerprint: String,
    order: Option<(Stage, usize, Vec<usize>)>,
    ddpm: DdpmSchedule,
    edm: EdmConfig,
    last: Option<LossBreakdown>,
}

/// SHA-256 over everything in the data that training reads.
pub fn data_fingerprint(catalog: &Catalog, sessions: &[Session]) -> String {
    let mut h = Sha256::new();
    for it in &catalog.items {
        h.update(it.item_id.to_le_bytes());
        for t in &it.text_tokens {
            h.update(t.to_le_bytes());
        }
        for v in &it.visual_feature {
            h.update(v.to_le_bytes());
        }
    }
    for s in sessions {
        h.update(s.user_id.to_le_bytes());
        h.update((s.steps.len() as u64).to_le_bytes());
        for st in &s.steps {
            h.update(st.query_id.to_le_bytes());
            h.update(st.clicked_item_id.to_le_bytes());
            h.update((st.exposed_unclicked_item_ids.len() as u64).to_le_bytes());
            for e in &st.exposed_unclicked_item_ids {
                h.update(e.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

fn check_data(cfg: &ModelConfig, catalog: &Catalog, examples: &[Example]) -> Result<(), TrainError> {
    let bad = |m: String| Err(TrainError::Config(m));
    if catalog.is_empty() {
        return bad("catalog is empty".into());
    }
    if catalog.vocab_size > cfg.vocab_size || catalog.item_len != cfg.item_len || catalog.visual_dim != cfg.visual_dim {
        return bad(format!(
            "model (vocab {}, item_len {}, visual_dim {}) does not fit the catalog (vocab {}, item_len {}, visual_dim {})",
            cfg.vocab_size, cfg.item_len, cfg.visual_dim, catalog.vocab_size, catalog.item_len, catalog.visual_dim
        ));
    }
    let n = catalog.len() as u32;
    for ex in examples {
        if ex.target >= n || ex.history.iter().chain(&ex.exposed).any(|&i| i >= n) {
            return bad(format!("user {} references an item outside the catalog", ex.user_id));
        }
        if cfg.use_query && ex.query_id as usize >= cfg.num_queries {
            return bad(format!(
                "query id {} exceeds num_queries {}",
                ex.query_id, cfg.num_queries
            ));
        }
    }
    Ok(())
}

fn numeric(stage: Stage, step: usize, last: Option<LossBreakdown>) -> impl Fn(ObjectiveError) -> TrainError {
    move |e| {
        let source = match e {
            ObjectiveError::Diff(d) | ObjectiveError::Model(ModelError::Diff(d)) => d,
            other => return TrainError::Objective(other),
        };
        match source {
            DiffError::NonFinite { .. } | DiffError::Optimizer(_) => TrainError::Numeric {
                stage,
                step,
                source,
                last,
            },
            d => TrainError::Objective(ObjectiveError::Diff(d)),
        }
    }
}

impl<'d> Trainer<'d> {
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        catalog: &'d Catalog,
        sessions: &[Session],
    ) -> Result<Self, TrainError> {
        config.validate()?;
        model_config.validate()?;
        let examples = build_examples(sessions, model_config.max_seq);
        check_data(&model_config, catalog, &examples)?;
        if examples.is_empty() && config.joint_steps > 0 {
            return Err(TrainError::Config(
                "no training examples (every session has one step)".into(),
            ));
        }
        let k = config.warmup_holdout_every;
        let warm_items: Vec<u32> = catalog
            .items
            .iter()
            .map(|i| i.item_id)
            .filter(|&id| k == 0 || id % k != k - 1)
            .collect();
        if warm_items.is_empty() && config.warmup_steps > 0 && !config.cold_start {
            return Err(TrainError::Config("warm-up holdout leaves no items".into()));
        }
        let model = KarmaModel::new(model_config)?;
        let opt = AdamW::new(config.optimizer, &model.params);
        let stage = if config.cold_start || config.warmup_steps == 0 {
            Stage::Joint
        } else {
            Stage::Warmup
        };
        let mut tr = Self {
            fingerprint: data_fingerprint(catalog, sessions),
            config,
            model,
            opt,
            state: TrainState { stage, step: 0 },
            catalog,
            examples,
            warm_items,
            order: None,
            ddpm: DdpmSchedule::default(),
            edm: EdmConfig::default(),
            last: None,
        };
        tr.normalize_state();
        Ok(tr)
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn optimizer(&self) -> &AdamW<f32> {
        &self.opt
    }

    pub fn into_model(self) -> KarmaModel<f32> {
        self.model
    }

    pub fn is_done(&self) -> bool {
        self.state.stage == Stage::Done
    }

    fn normalize_state(&mut self) {
        if self.state.stage == Stage::Warmup && self.state.step >= self.config.warmup_steps {
            self.state = TrainState {
                stage: Stage::Joint,
                step: 0,
            };
        }
        if self.state.stage == Stage::Joint && self.state.step >= self.config.joint_steps {
            self.state = TrainState {
                stage: Stage::Done,
                step: 0,
            };
        }
    }

    /// Runs every remaining step, calling `on_step` after each one.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepRecord, &KarmaModel<f32>) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while let Some(rec) = self.step()? {
            on_step(&rec, &self.model)?;
        }
        Ok(())
    }

    /// Runs one step; `None` once both stages are finished.
    pub fn step(&mut self) -> Result<Option<StepRecord>, TrainError> {
        let TrainState { stage, step } = self.state;
        let rec = match stage {
            Stage::Done => return Ok(None),
            Stage::Warmup => self.warmup_step(step),
            Stage::Joint => self.joint_step(step),
        }
        .map_err(numeric(stage, step, self.last))?;
        if !rec.skipped {
            self.last = Some(rec.loss);
        }
        self.state.step += 1;
        self.normalize_state();
        Ok(Some(rec))
    }

    /// Pool indices for positions `[step * batch, (step + 1) * batch)` of the
    /// stage's stream of per-epoch permutations.
    fn batch_indices(&mut self, stage: Stage, step: usize, batch: usize, pool: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        for p in step * batch..(step + 1) * batch {
            let epoch = p / pool;
            let fresh = !matches!(&self.order, Some((s, e, _)) if *s == stage && *e == epoch);
            if fresh {
                let seed = stream_seed(self.config.seed, TAG_ORDER, stage.id(), epoch as u64);
                let mut perm: Vec<usize> = (0..pool).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                self.order = Some((stage, epoch, perm));
            }
            out.push(self.order.as_ref().map(|o| o.2[p % pool]).unwrap_or(0));
        }
        out
    }

    fn rng(&self, tag: u64, stage: Stage, step: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, tag, stage.id(), step as u64))
    }

    fn lr_now(&self) -> f64 {
        let base = self.config.optimizer.lr;
        match self.config.lr_warmup_steps {
            0 => base,
            w => base * ((self.opt.step_count() + 1) as f64 / w as f64).min(1.0),
        }
    }

    /// Backward, optional encoder freeze, clipping and the AdamW update.
    fn update(
        &mut self,
        t: &mut Tape<f32>,
        total: crate::diffcore::Var,
        freeze: bool,
    ) -> Result<(f64, f64), ObjectiveError> {
        let g = t.backward(total)?;
        let mut grads = t.param_grads(&g);
        if freeze {
            let params = &self.model.params;
            grads.retain(|id| !params.name(id).starts_with("enc."));
        }
        let norm = grads.global_norm() as f64;
        if !norm.is_finite() {
            return Err(ObjectiveError::Diff(DiffError::NonFinite {
                op: "gradient norm",
                step: t.step(),
            }));
        }
        if let Some(c) = self.config.grad_clip {
            if norm > c {
                grads.scale((c / norm) as f32);
            }
        }
        let lr = self.lr_now();
        self.opt.config.lr = lr;
        self.opt.step(&mut self.model.params, &grads)?;
        if !self.model.params.all_finite() {
            return Err(ObjectiveError::Diff(DiffError::NonFinite {
                op: "optimizer update",
                step: t.step(),
            }));
        }
        Ok((lr, norm))
    }

    fn fresh_tape(&self) -> Tape<f32> {
        let mut t = Tape::new();
        t.set_step(self.opt.step_count());
        t
    }

    /// Embedding-conditioned reconstruction of isolated items.
    fn warmup_step(&mut self, step: usize) -> Result<StepRecord, ObjectiveError> {
        let n = self.warm_items.len();
        let idx = self.batch_indices(Stage::Warmup, step, self.config.warmup_batch.min(n), n);
        let catalog = self.catalog;
        let items: Vec<&[u32]> = idx
            .iter()
            .map(|&i| catalog.item(self.warm_items[i]).text_tokens.as_slice())
            .collect();
        let mut t = self.fresh_tape();
        let m = &self.model;
        let e = m.encoder.forward(&mut t, &m.params, &m.config, &items)?;
        let loss = recon_loss(&mut t, m, e.embeddings, &items)?;
        let v = t.scalar(loss) as f64;
        if !v.is_finite() {
            return Err(ObjectiveError::Diff(DiffError::NonFinite {
                op: "warm-up loss",
                step: t.step(),
            }));
        }
        let (lr, grad_norm) = self.update(&mut t, loss, false)?;
        Ok(StepRecord {
            stage: Stage::Warmup,
            step,
            loss: LossBreakdown {
                recon: v,
                total: v,
                tokens: items.len() * self.model.config.item_len,
                ..Default::default()
            },
            lr,
            grad_norm,
            skipped: false,
        })
    }

    fn joint_step(&mut self, step: usize) -> Result<StepRecord, ObjectiveError> {
        let cfg = self.config.clone();
        let n = self.examples.len();
        let idx = self.batch_indices(Stage::Joint, step, cfg.batch_size.min(n), n);
        let batch: Vec<&Example> = idx.iter().map(|&i| &self.examples[i]).collect();
        let targets: Vec<BatchTarget<'_>> = batch
            .iter()
            .map(|e| BatchTarget {
                target: e.target,
                exposed: &e.exposed,
            })
            .collect();
        let mut rng = self.rng(TAG_NEG, Stage::Joint, step);
        let negs = sample_negatives(&targets, cfg.hard_negatives, cfg.in_batch_negatives, &mut rng);
        let keep: Vec<usize> = (0..batch.len()).filter(|&b| !negs[b].negatives.is_empty()).collect();
        for b in (0..batch.len()).filter(|b| negs[*b].negatives.is_empty()) {
            log::warn!(
                "joint step {step}: target {} of user {} has no negatives; dropped",
                batch[b].target,
                batch[b].user_id
            );
        }
        if keep.is_empty() {
            log::warn!("joint step {step}: no example has a negative; step skipped");
            return Ok(StepRecord {
                stage: Stage::Joint,
                step,
                loss: LossBreakdown::default(),
                lr: self.lr_now(),
                grad_norm: 0.0,
                skipped: true,
            });
        }

        // Every item touched by the batch is encoded exactly once.
        let mut ids = BTreeSet::new();
        for &b in &keep {
            ids.extend(batch[b].history.iter().copied());
            ids.insert(batch[b].target);
            ids.extend(negs[b].negatives.iter().map(|n| n.0));
        }
        let ids: Vec<u32> = ids.into_iter().collect();
        let row = |id: u32| ids.binary_search(&id).unwrap_or(0);
        let catalog = self.catalog;
        let tokens: Vec<&[u32]> = ids.iter().map(|&i| catalog.item(i).text_tokens.as_slice()).collect();

        let m = &self.model;
        let mut t = self.fresh_tape();
        let table = m.encoder.forward(&mut t, &m.params, &m.config, &tokens)?.embeddings;
        let hist_rows: Vec<Vec<usize>> = keep
            .iter()
            .map(|&b| batch[b].history.iter().map(|&i| row(i)).collect())
            .collect();
        let inputs: Vec<HistoryInput<'_>> = keep
            .iter()
            .zip(&hist_rows)
            .map(|(&b, rows)| HistoryInput {
                rows,
                query: Some(batch[b].query_id),
            })
            .collect();
        let out = m.decoder.forward(&mut t, &m.params, &m.config, table, &inputs)?;
        let h = out.interest;

        let pos_rows: Vec<usize> = keep.iter().map(|&b| row(batch[b].target)).collect();
        let mut neg_rows = Vec::new();
        let mut owner = Vec::new();
        for (k, &b) in keep.iter().enumerate() {
            for &(id, _) in &negs[b].negatives {
                neg_rows.push(row(id));
                owner.push(k);
            }
        }
        let pos = t.gather_rows(table, &pos_rows)?;
        let neg = t.gather_rows(table, &neg_rows)?;
        let act = match cfg.action_loss {
            ActionLoss::PairwiseCe => pairwise_ce_loss(&mut t, h, pos, neg, &owner)?,
            ActionLoss::InfoNce { temperature } => info_nce_loss(&mut t, h, pos, neg, &owner, temperature)?,
        };

        let (gw, rw, img_on) = cfg.component_weights();
        let dec_on = cfg.weights.lambda_dec > 0.0;
        let target_tokens: Vec<&[u32]> = keep
            .iter()
            .map(|&b| catalog.item(batch[b].target).text_tokens.as_slice())
            .collect();
        let mut parts = LossParts {
            act: Some(act),
            ..Default::default()
        };
        let mut tokens = 0;
        if dec_on && gw > 0.0 {
            let groups: Vec<_> = (0..keep.len()).map(|k| out.valid_rows(k)).collect();
            let g = gen_loss(&mut t, m, out.states, &groups, &target_tokens)?;
            parts.gen = Some(if gw == 1.0 { g } else { t.scale(g, gw as f32)? });
            tokens += keep.len() * m.config.item_len;
        }
        if dec_on && rw > 0.0 {
            let r = recon_loss(&mut t, m, h, &target_tokens)?;
            parts.recon = Some(if rw == 1.0 { r } else { t.scale(r, rw as f32)? });
            tokens += keep.len() * m.config.item_len;
        }
        if dec_on && img_on && cfg.weights.lambda_img > 0.0 {
            let d = m.config.visual_dim;
            let vis: Vec<f32> = keep
                .iter()
                .flat_map(|&b| catalog.item(batch[b].target).visual_feature.iter().map(|&x| x as f32))
                .collect();
            let v = Tensor::matrix(keep.len(), d, vis)?;
            let head = m.visual_head();
            let mut irng = self.rng(TAG_IMG, Stage::Joint, step);
            parts.img = Some(match cfg.img_objective {
                ImgObjective::Ddpm => ddpm_loss(&mut t, &head, &v, h, &self.ddpm, &mut irng)?,
                ImgObjective::Edm => edm_loss(&mut t, &head, &v, h, &self.edm, &mut irng)?,
                ImgObjective::Fm => fm_loss(&mut t, &head, &v, h, &mut irng)?,
            });
        }
        let (total, mut loss) = karma_loss(&mut t, &parts, &cfg.weights)?;
        loss.pairs = owner.len();
        loss.tokens = tokens;
        if !loss.total.is_finite() {
            return Err(ObjectiveError::Diff(DiffError::NonFinite {
                op: "joint loss",
                step: t.step(),
            }));
        }
        let (lr, grad_norm) = self.update(&mut t, total, cfg.freeze_encoder)?;
        Ok(StepRecord {
            stage: Stage::Joint,
            step,
            loss,
            lr,
            grad_norm,
            skipped: false,
        })
    }

    /// Parameters, optimizer moments and the position of the next step.
    pub fn checkpoint(&self) -> CheckpointFile {
        let mut tensors = self.model.export_params("param/");
        let (m, v) = self.opt.moments();
        for (prefix, moments) in [("adam_m/", m), ("adam_v/", v)] {
            for (id, mom) in self.model.params.ids().zip(moments) {
                let shape = self.model.params.get(id).shape().to_vec();
                let t = Tensor::new(shape, mom.clone()).expect("moment shape matches its parameter");
                tensors.push((format!("{prefix}{}", self.model.params.name(id)), t));
            }
        }
        CheckpointFile {
            meta: json!({
                "model": self.model.config,
                "train": self.config,
                "state": self.state,
                "optimizer_step": self.opt.step_count(),
                "data_fingerprint": self.fingerprint,
            }),
            tensors,
        }
    }

    /// Restores a trainer from [`Trainer::checkpoint`] output. The data must
    /// be the data the checkpoint was trained on.
    pub fn resume(file: &CheckpointFile, catalog: &'d Catalog, sessions: &[Session]) -> Result<Self, TrainError> {
        let meta = |k: &str| {
            file.meta
                .get(k)
                .cloned()
                .ok_or_else(|| CheckpointError::Meta(format!("missing {k}")))
        };
        let parse_err = |e: serde_json::Error| CheckpointError::Meta(e.to_string());
        let train: TrainConfig = serde_json::from_value(meta("train")?).map_err(parse_err)?;
        let state: TrainState = serde_json::from_value(meta("state")?).map_err(parse_err)?;
        let opt_step: u64 = serde_json::from_value(meta("optimizer_step")?).map_err(parse_err)?;
        let fp: String = serde_json::from_value(meta("data_fingerprint")?).map_err(parse_err)?;
        let mut tr = Self::new(file.model_config()?, train, catalog, sessions)?;
        if fp != tr.fingerprint {
            return Err(TrainError::DataMismatch {
                found: fp,
                expected: tr.fingerprint,
            });
        }
        let params = &tr.model.params;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (prefix, out) in [("adam_m/", &mut m), ("adam_v/", &mut v)] {
            for id in params.ids() {
                let name = format!("{prefix}{}", params.name(id));
                let t = file.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
                if t.shape() != params.get(id).shape() {
                    return Err(CheckpointError::Shape {
                        name,
                        expected: params.get(id).shape().to_vec(),
                        found: t.shape().to_vec(),
                    }
                    .into());
                }
                out.push(t.data().to_vec());
            }
        }
        if file.tensors.len() != 3 * params.len() {
            let known = |n: &str| {
                ["param/", "adam_m/", "adam_v/"]
                    .iter()
                    .any(|p| n.strip_prefix(p).is_some_and(|s| params.find(s).is_some()))
            };
            let name = file
                .tensors
                .iter()
                .find(|(n, _)| !known(n))
                .map_or_else(|| "duplicate tensor".to_string(), |(n, _)| n.clone());
            return Err(CheckpointError::Unexpected(name).into());
        }
        tr.model.import_params(file, "param/")?;
        tr.opt = AdamW::from_state(tr.config.optimizer, opt_step, m, v);
        tr.state = state;
        tr.normalize_state();
        Ok(tr)
    }
}
