use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::synthdata::Session;

/// One training example: predict `target` from the clicks before it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user_id: u32,
    pub step_index: usize,
    /// Most recent clicks first-to-last, at most `max_seq`.
    pub history: Vec<u32>,
    pub query_id: u32,
    pub target: u32,
    pub exposed: Vec<u32>,
}

/// Every step after the first of every session, history capped to the
/// `max_seq` most recent clicks.
pub fn build_examples(sessions: &[Session], max_seq: usize) -> Vec<Example> {
    let mut out = Vec::new();
    for s in sessions {
        for t in 1..s.steps.len() {
            let from = t.saturating_sub(max_seq);
            out.push(Example {
                user_id: s.user_id,
                step_index: t,
                history: s.steps[from..t].iter().map(|x| x.clicked_item_id).collect(),
                query_id: s.steps[t].query_id,
                target: s.steps[t].clicked_item_id,
                exposed: s.steps[t].exposed_unclicked_item_ids.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct BatchTarget<'a> {
    pub target: u32,
    pub exposed: &'a [u32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegSource {
    Hard,
    InBatch,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeSet {
    pub negatives: Vec<(u32, NegSource)>,
}

impl NegativeSet {
    pub fn count(&self, src: NegSource) -> usize {
        self.negatives.iter().filter(|(_, s)| *s == src).count()
    }
}

/// Hard negatives: up to `hard` drawn without replacement from the target's
/// exposed-unclicked list. In-batch: up to `min(batch - 1, in_batch)` other
/// targets of the batch, skipping any with the same item id.
pub fn sample_negatives(
    batch: &[BatchTarget<'_>],
    hard: usize,
    in_batch: usize,
    rng: &mut impl Rng,
) -> Vec<NegativeSet> {
    let cap = in_batch.min(batch.len().saturating_sub(1));
    batch
        .iter()
        .enumerate()
        .map(|(i, bt)| {
            let mut negs = Vec::new();
            let pool: Vec<u32> = bt.exposed.iter().copied().filter(|&x| x != bt.target).collect();
            let k = hard.min(pool.len());
            for j in sample(rng, pool.len(), k) {
                negs.push((pool[j], NegSource::Hard));
            }
            let others: Vec<u32> = batch
                .iter()
                .enumerate()
                .filter(|&(j, o)| j != i && o.target != bt.target)
                .map(|(_, o)| o.target)
                .collect();
            let k = cap.min(others.len());
            for j in sample(rng, others.len(), k) {
                negs.push((others[j], NegSource::InBatch));
            }
            NegativeSet { negatives: negs }
        })
        .collect()
}
