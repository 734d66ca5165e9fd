use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<F> {
    name: String,
    value: Tensor<F>,
    decay: bool,
}

/// Named, ordered parameter storage. Registration order is the serialization
/// order and the optimizer's moment order.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    /// Identifies the store on a tape; clones share it.
    uid: u64,
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(0);

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a weight-decayed parameter.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Registers a parameter exempt from weight decay (biases, norm gains).
    pub fn add_no_decay(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<F>, decay: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
        }
    }
}

/// Gradients keyed by parameter, produced by [`super::Tape::param_grads`].
/// Parameters absent from the tape (or not reached by the loss) have no entry.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads<F> {
    pub(crate) grads: Vec<(ParamId, Vec<F>)>,
}

impl<F: Real> ParamGrads<F> {
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.grads.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        self.grads.retain(|(p, _)| keep(*p));
    }

    pub fn scale(&mut self, k: F) {
        for (_, g) in &mut self.grads {
            for x in g.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn global_norm(&self) -> F {
        self.grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&x| x * x)
            .sum::<F>()
            .sqrt()
    }
}
