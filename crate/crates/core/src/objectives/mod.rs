//! Loss functions on the tape.
//!
//! All sums over pairs, tokens and dimensions are averaged so that the
//! weights stay comparable across batch shapes.

mod diffusion;

pub use diffusion::{
    ddpm_loss, ddpm_loss_with, ddpm_sample, edm_loss, edm_loss_with, edm_precond, edm_sample, edm_weight, fm_loss,
    fm_loss_with, fm_sample, DdpmSchedule, EdmConfig,
};

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Real, Tape, Var};
use crate::model::{KarmaModel, ModelError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no negatives for the action loss")]
    EmptyNegatives,
    #[error("target has no tokens")]
    EmptyTarget,
    #[error("noise level must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("loss weight {name} must be a finite non-negative number, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// `lambda_dec` scales the whole decodability term; `lambda_img` scales the
/// visual term inside it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_dec: f64,
    pub lambda_img: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dec: 1.0,
            lambda_img: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, value) in [("lambda_dec", self.lambda_dec), ("lambda_img", self.lambda_img)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ObjectiveError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Scalar loss values of one step. Absent components are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub act: f64,
    pub gen: f64,
    pub recon: f64,
    pub img: f64,
    pub total: f64,
    /// Scored (positive, negative) pairs.
    pub pairs: usize,
    /// Target tokens scored by the text losses.
    pub tokens: usize,
}

impl LossBreakdown {
    /// `act + lambda_dec * (gen + recon + lambda_img * img)`.
    pub fn combine(act: f64, gen: f64, recon: f64, img: f64, w: &LossWeights) -> f64 {
        act + w.lambda_dec * (gen + recon + w.lambda_img * img)
    }

    pub fn recomputed_total(&self, w: &LossWeights) -> f64 {
        Self::combine(self.act, self.gen, self.recon, self.img, w)
    }
}

/// Loss nodes of one step; `None` components are not part of the graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub act: Option<Var>,
    pub gen: Option<Var>,
    pub recon: Option<Var>,
    pub img: Option<Var>,
}

/// Combines the present components into the training objective. A component
/// whose effective weight is zero is left out of the graph entirely, so
/// `lambda_dec = 0` yields exactly the action-only objective.
pub fn karma_loss<F: Real>(
    t: &mut Tape<F>,
    parts: &LossParts,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    w.validate()?;
    let read = |t: &Tape<F>, v: Option<Var>| v.map_or(0.0, |v| t.scalar(v).to_f64().unwrap_or(f64::NAN));
    let mut terms = Vec::new();
    if let Some(a) = parts.act {
        terms.push(a);
    }
    if w.lambda_dec > 0.0 {
        let mut dec = Vec::new();
        dec.extend(parts.gen);
        dec.extend(parts.recon);
        if let Some(img) = parts.img.filter(|_| w.lambda_img > 0.0) {
            dec.push(if w.lambda_img == 1.0 {
                img
            } else {
                t.scale(img, F::lit(w.lambda_img))?
            });
        }
        if !dec.is_empty() {
            let mut d = dec[0];
            for &x in &dec[1..] {
                d = t.add(d, x)?;
            }
            terms.push(if w.lambda_dec == 1.0 {
                d
            } else {
                t.scale(d, F::lit(w.lambda_dec))?
            });
        }
    }
    let total = match terms.as_slice() {
        [] => return Err(ObjectiveError::Shape("no loss components".into())),
        [one] => *one,
        [first, rest @ ..] => {
            let mut acc = *first;
            for &x in rest {
                acc = t.add(acc, x)?;
            }
            acc
        }
    };
    let breakdown = LossBreakdown {
        act: read(t, parts.act),
        gen: read(t, parts.gen),
        recon: read(t, parts.recon),
        img: read(t, parts.img),
        total: t.scalar(total).to_f64().unwrap_or(f64::NAN),
        pairs: 0,
        tokens: 0,
    };
    Ok((total, breakdown))
}

/// Mean over pairs of `-log sigmoid(h.e_pos - h.e_neg)`.
///
/// `h` and `pos` are `[B, d]`; `neg` is `[P, d]` and `owner[p]` is the row of
/// `h`/`pos` that negative `p` is paired with.
pub fn pairwise_ce_loss<F: Real>(
    t: &mut Tape<F>,
    h: Var,
    pos: Var,
    neg: Var,
    owner: &[usize],
) -> Result<Var, ObjectiveError> {
    let m = margins(t, h, pos, neg, owner)?;
    let ls = t.log_sigmoid(m)?;
    let mean = t.mean(ls)?;
    Ok(t.neg(mean)?)
}

/// Per-pair margins `h.e_pos - h.e_neg` as a `[P, 1]` column.
pub fn margins<F: Real>(t: &mut Tape<F>, h: Var, pos: Var, neg: Var, owner: &[usize]) -> Result<Var, ObjectiveError> {
    if owner.is_empty() {
        return Err(ObjectiveError::EmptyNegatives);
    }
    let (b, d) = t.dims(h);
    if t.dims(pos) != (b, d) || t.dims(neg) != (owner.len(), d) || owner.iter().any(|&o| o >= b) {
        return Err(ObjectiveError::Shape(format!(
            "h {:?}, pos {:?}, neg {:?}, {} owners",
            t.dims(h),
            t.dims(pos),
            t.dims(neg),
            owner.len()
        )));
    }
    let hp = t.gather_rows(h, owner)?;
    let pp = t.gather_rows(pos, owner)?;
    let sp = t.row_dot(hp, pp)?;
    let sn = t.row_dot(hp, neg)?;
    Ok(t.sub(sp, sn)?)
}

/// Temperature-scaled InfoNCE over the same candidates (ablation only):
/// each target's softmax runs over its positive and its own negatives.
pub fn info_nce_loss<F: Real>(
    t: &mut Tape<F>,
    h: Var,
    pos: Var,
    neg: Var,
    owner: &[usize],
    temperature: f64,
) -> Result<Var, ObjectiveError> {
    if !(temperature > 0.0) {
        return Err(ObjectiveError::Shape(format!("temperature {temperature}")));
    }
    // Scores are shifted by the positive's score: the positive sits at 0 and
    // negative j at -m_j / tau, padded to a rectangular [targets, 1 + max_neg].
    let m = margins(t, h, pos, neg, owner)?;
    let b = t.dims(h).0;
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); b];
    for (p, &o) in owner.iter().enumerate() {
        per[o].push(p);
    }
    let width = per.iter().map(|v| v.len()).max().unwrap_or(0);
    let scaled = t.scale(m, F::lit(-1.0 / temperature))?;
    let zero = t.constant(&crate::diffcore::Tensor::zeros(vec![1, 1]))?;
    let fill = t.constant(&crate::diffcore::Tensor::filled(vec![1, 1], F::lit(-1e4)))?;
    let all = t.concat_rows(&[scaled, zero, fill])?;
    let (zero_at, fill_at) = (owner.len(), owner.len() + 1);
    let mut layout = Vec::new();
    let mut rows = Vec::new();
    for (o, ps) in per.iter().enumerate() {
        if ps.is_empty() {
            continue;
        }
        rows.push(o);
        layout.push(zero_at);
        layout.extend(ps.iter().copied());
        layout.extend(std::iter::repeat_n(fill_at, width - ps.len()));
    }
    let flat = t.gather_rows(all, &layout)?;
    let n = rows.len();
    let scores = reshape_rows(t, flat, n, width + 1)?;
    let ce = t.cross_entropy(scores, &vec![0; n])?;
    Ok(ce)
}

/// `[n*k, 1] -> [n, k]` via column slices and concatenation.
fn reshape_rows<F: Real>(t: &mut Tape<F>, col: Var, n: usize, k: usize) -> Result<Var, ObjectiveError> {
    let mut cols = Vec::with_capacity(k);
    for j in 0..k {
        let idx: Vec<usize> = (0..n).map(|i| i * k + j).collect();
        cols.push(t.gather_rows(col, &idx)?);
    }
    Ok(t.concat_cols(&cols)?)
}

/// Mean per-token cross-entropy of `logits` `[N, V]` against `targets`.
pub fn token_ce<F: Real>(t: &mut Tape<F>, logits: Var, targets: &[usize]) -> Result<Var, ObjectiveError> {
    if targets.is_empty() {
        return Err(ObjectiveError::EmptyTarget);
    }
    Ok(t.cross_entropy(logits, targets)?)
}

fn flat_targets(targets: &[&[u32]]) -> Result<Vec<usize>, ObjectiveError> {
    if targets.is_empty() || targets.iter().any(|x| x.is_empty()) {
        return Err(ObjectiveError::EmptyTarget);
    }
    Ok(targets.iter().flat_map(|x| x.iter().map(|&w| w as usize)).collect())
}

/// History-conditioned generation: example `b` sees the decoder state rows
/// `groups[b]` of `states` as its prefix.
pub fn gen_loss<F: Real>(
    t: &mut Tape<F>,
    model: &KarmaModel<F>,
    states: Var,
    groups: &[Range<usize>],
    targets: &[&[u32]],
) -> Result<Var, ObjectiveError> {
    let tgt = flat_targets(targets)?;
    let logits = model.text_logits(t, states, groups, targets)?;
    token_ce(t, logits, &tgt)
}

/// Embedding-conditioned reconstruction: row `b` of `h` is the only
/// conditioning signal for `targets[b]`.
pub fn recon_loss<F: Real>(
    t: &mut Tape<F>,
    model: &KarmaModel<F>,
    h: Var,
    targets: &[&[u32]],
) -> Result<Var, ObjectiveError> {
    if t.dims(h).0 != targets.len() {
        return Err(ObjectiveError::Shape(format!(
            "{} conditioning rows for {} targets",
            t.dims(h).0,
            targets.len()
        )));
    }
    let tgt = flat_targets(targets)?;
    let groups: Vec<Range<usize>> = (0..targets.len()).map(|i| i..i + 1).collect();
    let logits = model.text_logits(t, h, &groups, targets)?;
    token_ce(t, logits, &tgt)
}

/// Mean squared error to a target that receives no gradient.
pub fn ar_mse_loss<F: Real>(t: &mut Tape<F>, h: Var, target: Var) -> Result<Var, ObjectiveError> {
    if t.dims(h) != t.dims(target) {
        return Err(ObjectiveError::Shape(format!(
            "{:?} vs {:?}",
            t.dims(h),
            t.dims(target)
        )));
    }
    let tgt = t.detach(target)?;
    Ok(t.mse(h, tgt)?)
}
