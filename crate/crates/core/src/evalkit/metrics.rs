use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{dot, EvalError};
use crate::synthdata::{item_terms, jaccard, Catalog};

/// Ranked retrieval result for one eval target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun {
    pub target: u32,
    pub ranked: Vec<u32>,
    pub scores: Vec<f64>,
}

/// Exact top-`k` item ids by dot product with `h`, score descending, ties
/// by ascending id.
pub fn retrieve_topk(h: &[f32], items: &[Vec<f32>], k: usize) -> Result<Vec<(u32, f64)>, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyCatalog);
    }
    if k > items.len() {
        return Err(EvalError::KTooLarge { k, len: items.len() });
    }
    if let Some(r) = items.iter().find(|r| r.len() != h.len()) {
        return Err(EvalError::Dim(format!("query {} vs item {}", h.len(), r.len())));
    }
    let mut scored: Vec<(u32, f64)> = items
        .iter()
        .enumerate()
        .map(|(i, e)| (i as u32, dot(h, e) + 0.0))
        .collect();
    let cmp = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored)
}

/// Fraction of runs whose target is among the first `k` ranked ids.
/// An empty run set gives 0.
pub fn hr_at_k(runs: &[RetrievalRun], k: usize) -> Result<f64, EvalError> {
    if runs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in runs {
        if k > r.ranked.len() {
            return Err(EvalError::KTooLarge { k, len: r.ranked.len() });
        }
        hits += r.ranked[..k].contains(&r.target) as usize;
    }
    Ok(hits as f64 / runs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub score: f64,
    pub clicked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaucResult {
    /// `None` when no session has both a positive and a negative.
    pub value: Option<f64>,
    pub sessions: usize,
    pub pairs: u64,
}

/// Per-session AUC (ties count one half), averaged with each session
/// weighted by its number of (positive, negative) pairs.
pub fn gauc(sessions: &[Vec<Impression>]) -> GaucResult {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    let mut used = 0;
    for s in sessions {
        // `+ 0.0` folds -0 into +0 so that they tie.
        let mut neg: Vec<f64> = s.iter().filter(|i| !i.clicked).map(|i| i.score + 0.0).collect();
        let npos = s.iter().filter(|i| i.clicked).count();
        if npos == 0 || neg.is_empty() {
            continue;
        }
        neg.sort_by(f64::total_cmp);
        for p in s.iter().filter(|i| i.clicked) {
            let score = p.score + 0.0;
            let below = neg.partition_point(|&n| n.total_cmp(&score) == Ordering::Less);
            let upto = neg.partition_point(|&n| n.total_cmp(&score) != Ordering::Greater);
            wins += below as f64 + 0.5 * (upto - below) as f64;
        }
        pairs += (npos * neg.len()) as u64;
        used += 1;
    }
    GaucResult {
        value: (pairs > 0).then(|| wins / pairs as f64),
        sessions: used,
        pairs,
    }
}

/// Mean over runs of the mean Jaccard overlap between the target's terms and
/// each of the top-`k` retrieved items' terms.
pub fn js_at_k(runs: &[RetrievalRun], k: usize, catalog: &Catalog) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if runs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in runs {
        if k > r.ranked.len() {
            return Err(EvalError::KTooLarge { k, len: r.ranked.len() });
        }
        let t = item_terms(catalog.item(r.target));
        let s: f64 = r.ranked[..k]
            .iter()
            .map(|&i| jaccard(&t, &item_terms(catalog.item(i))))
            .sum();
        total += s / k as f64;
    }
    Ok(total / runs.len() as f64)
}
