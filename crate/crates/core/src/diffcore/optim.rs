use serde::{Deserialize, Serialize};

use super::{DiffError, ParamGrads, ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay and bias correction.
///
/// Parameters without a gradient in a given step are left untouched,
/// including their decay and moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros = |_| -> Vec<Vec<F>> { store.ids().map(|id| vec![F::zero(); store.get(id).len()]).collect() };
        Self {
            config,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn from_state(config: AdamWConfig, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>) -> Result<(), DiffError> {
        let c = self.config;
        if !(c.lr > 0.0) {
            return Err(DiffError::Optimizer(format!(
                "learning rate must be positive, got {}",
                c.lr
            )));
        }
        if self.m.len() != store.len() {
            return Err(DiffError::Optimizer(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            if g.len() != store.get(id).len() {
                return Err(DiffError::Optimizer(format!(
                    "gradient for {} has {} values, parameter has {}",
                    store.name(id),
                    g.len(),
                    store.get(id).len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(DiffError::Optimizer(format!(
                    "non-finite gradient for {} at step {}",
                    store.name(id),
                    self.step + 1
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let lr = F::lit(c.lr);
        let b1 = F::lit(c.beta1);
        let b2 = F::lit(c.beta2);
        let eps = F::lit(c.eps);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        for (id, g) in grads.iter() {
            let decay = if store.decays(id) {
                F::one() - lr * F::lit(c.weight_decay)
            } else {
                F::one()
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
