use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{interest_embeddings, item_embeddings, score_queries, EvalError, EvalOptions, MetricsReport};
use crate::diffcore::{AdamW, AdamWConfig, ParamStore, Tape, Tensor};
use crate::model::{ConditionalMlp, Denoiser, HeadRef, KarmaModel, ModelError};
use crate::objectives::{
    ar_mse_loss, ddpm_loss, ddpm_sample, edm_loss, edm_sample, fm_loss, fm_sample, DdpmSchedule, EdmConfig,
};
use crate::synthdata::{Catalog, EvalTarget, Session};
use crate::trainer::{build_examples, GeneratorKind};

/// Identical budget and architecture for every generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub time_features: usize,
    pub sampler_steps: usize,
    /// Targets are multiplied by this before training (`None` = sqrt(dim),
    /// which gives unit-norm embeddings roughly unit per-coordinate scale).
    pub data_scale: Option<f64>,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1e-3,
            hidden: 256,
            time_features: 16,
            sampler_steps: 20,
            data_scale: None,
            seed: 0,
        }
    }
}

fn kind_id(k: GeneratorKind) -> u64 {
    GeneratorKind::ALL.iter().position(|&x| x == k).unwrap_or(0) as u64
}

pub struct TrainedHead {
    pub kind: GeneratorKind,
    pub mlp: ConditionalMlp,
    pub store: ParamStore<f32>,
    /// Training loss per step.
    pub losses: Vec<f64>,
    pub scale: f64,
    pub sampler_steps: usize,
    ddpm: DdpmSchedule,
    edm: EdmConfig,
}

fn to_tensor(rows: &[&Vec<f32>], d: usize, scale: f32) -> Result<Tensor<f32>, EvalError> {
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().map(|&x| x * scale)).collect();
    Ok(Tensor::matrix(rows.len(), d, flat).map_err(ModelError::from)?)
}

/// Fits a generator of `target` rows from `cond` rows.
///
/// `mse` regresses the target from the condition (the noisy input is held
/// at zero); the others learn the conditional distribution with their own
/// objective.
pub fn train_generator_head(
    kind: GeneratorKind,
    cond: &[Vec<f32>],
    target: &[Vec<f32>],
    cfg: &HeadTrainConfig,
) -> Result<TrainedHead, EvalError> {
    if cond.is_empty() || cond.len() != target.len() {
        return Err(EvalError::Dim(format!(
            "{} conditions for {} targets",
            cond.len(),
            target.len()
        )));
    }
    let (cd, xd) = (cond[0].len(), target[0].len());
    if cond.iter().any(|c| c.len() != cd) || target.iter().any(|t| t.len() != xd) {
        return Err(EvalError::Dim("ragged rows".into()));
    }
    let scale = cfg.data_scale.unwrap_or((xd as f64).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xA5A5_0000 + kind_id(kind)));
    let mut store = ParamStore::new();
    let mlp = ConditionalMlp::new(&mut store, "gen", xd, cd, cfg.hidden, cfg.time_features, &mut rng);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        &store,
    );
    let (ddpm, edm) = (DdpmSchedule::default(), EdmConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    let b = cfg.batch.min(cond.len()).max(1);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..cond.len())).collect();
        let c = to_tensor(&idx.iter().map(|&i| &cond[i]).collect::<Vec<_>>(), cd, 1.0)?;
        let v = to_tensor(&idx.iter().map(|&i| &target[i]).collect::<Vec<_>>(), xd, scale as f32)?;
        let mut t = Tape::new();
        t.set_step(step as u64);
        let cv = t.constant(&c).map_err(ModelError::from)?;
        let head = HeadRef::new(&mlp, &store, None);
        let loss = match kind {
            GeneratorKind::Mse => {
                let x = t.constant(&Tensor::zeros(vec![b, xd])).map_err(ModelError::from)?;
                let pred = head.predict(&mut t, x, cv, &vec![0.0; b]).map_err(ModelError::from)?;
                let tv = t.constant(&v).map_err(ModelError::from)?;
                ar_mse_loss(&mut t, pred, tv)?
            }
            GeneratorKind::Ddpm => ddpm_loss(&mut t, &head, &v, cv, &ddpm, &mut rng)?,
            GeneratorKind::Edm => edm_loss(&mut t, &head, &v, cv, &edm, &mut rng)?,
            GeneratorKind::Fm => fm_loss(&mut t, &head, &v, cv, &mut rng)?,
        };
        losses.push(t.scalar(loss) as f64);
        let g = t.backward(loss).map_err(ModelError::from)?;
        let grads = t.param_grads(&g);
        opt.step(&mut store, &grads).map_err(ModelError::from)?;
    }
    Ok(TrainedHead {
        kind,
        mlp,
        store,
        losses,
        scale,
        sampler_steps: cfg.sampler_steps,
        ddpm,
        edm,
    })
}

impl TrainedHead {
    /// One generated embedding per condition row (in the target's units).
    pub fn generate(&self, cond: &[Vec<f32>], rng: &mut impl Rng) -> Result<Vec<Vec<f32>>, EvalError> {
        if cond.is_empty() {
            return Ok(Vec::new());
        }
        let cd = self.mlp.cond_dim();
        let xd = self.mlp.x_dim();
        let c = to_tensor(&cond.iter().collect::<Vec<_>>(), cd, 1.0)?;
        let head = HeadRef::new(&self.mlp, &self.store, None);
        let out = match self.kind {
            GeneratorKind::Mse => {
                let mut t = Tape::inference();
                let x = t
                    .constant(&Tensor::zeros(vec![cond.len(), xd]))
                    .map_err(ModelError::from)?;
                let cv = t.constant(&c).map_err(ModelError::from)?;
                let p = head
                    .predict(&mut t, x, cv, &vec![0.0; cond.len()])
                    .map_err(ModelError::from)?;
                t.tensor(p)
            }
            GeneratorKind::Ddpm => ddpm_sample(&head, &c, &self.ddpm, self.sampler_steps, rng)?,
            GeneratorKind::Edm => edm_sample(&head, &c, &self.edm, self.sampler_steps, rng)?,
            GeneratorKind::Fm => fm_sample(&head, &c, self.sampler_steps, rng)?,
        };
        let inv = (1.0 / self.scale) as f32;
        Ok(out
            .data()
            .chunks(xd)
            .map(|r| r.iter().map(|&x| x * inv).collect())
            .collect())
    }

    /// Mean loss over the last tenth of training changed by less than `tol`
    /// (relative) against the tenth before it.
    pub fn plateaued(&self, tol: f64) -> bool {
        let n = self.losses.len() / 10;
        if n == 0 {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let last = mean(&self.losses[self.losses.len() - n..]);
        let prev = mean(&self.losses[self.losses.len() - 2 * n..self.losses.len() - n]);
        ((prev - last) / prev.abs().max(1e-12)).abs() < tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub head: HeadTrainConfig,
    pub eval: EvalOptions,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            head: HeadTrainConfig::default(),
            eval: EvalOptions {
                sink_items: 0,
                ..EvalOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub generator: String,
    pub report: MetricsReport,
    pub final_loss: f64,
    pub plateaued: bool,
    /// Samples drawn per eval target.
    pub samples_per_target: usize,
}

/// Fits each generator to map `h_t` of the frozen base onto the clicked
/// item's embedding (training split), then retrieves with one generated
/// embedding per held-out target.
pub fn compare_generators(
    model: &KarmaModel<f32>,
    catalog: &Catalog,
    train: &[Session],
    eval: &[EvalTarget],
    cfg: &CompareConfig,
) -> Result<Vec<GeneratorReport>, EvalError> {
    let items = item_embeddings(model, catalog)?;
    let examples = build_examples(train, model.config.max_seq);
    let hist: Vec<(&[u32], u32)> = examples.iter().map(|e| (e.history.as_slice(), e.query_id)).collect();
    let cond = interest_embeddings(model, &items, &hist, cfg.eval.batch)?;
    let target: Vec<Vec<f32>> = examples.iter().map(|e| items[e.target as usize].clone()).collect();
    let eval_hist: Vec<(&[u32], u32)> = eval.iter().map(|e| (e.history.as_slice(), e.query_id)).collect();
    let eval_h = interest_embeddings(model, &items, &eval_hist, cfg.eval.batch)?;
    let mut out = Vec::new();
    for kind in GeneratorKind::ALL {
        let head = train_generator_head(kind, &cond, &target, &cfg.head)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.head.seed ^ (0x5EED_0000 + kind_id(kind)));
        let generated = head.generate(&eval_h, &mut rng)?;
        let mut report = score_queries(&generated, &items, catalog, eval, &cfg.eval)?;
        report.variant = format!("generator:{}", kind.as_str());
        report.seed = cfg.head.seed;
        report.step = cfg.head.steps;
        out.push(GeneratorReport {
            generator: kind.as_str().into(),
            final_loss: head.losses.last().copied().unwrap_or(f64::NAN),
            plateaued: head.plateaued(0.05),
            samples_per_target: 1,
            report,
        });
    }
    Ok(out)
}
