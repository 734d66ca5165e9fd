use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{AttnSpec, DiffError, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub(crate) fn normal<F: Real>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(std * rng.sample::<f64, _>(StandardNormal)))
}

/// A dense layer `x W + b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), normal(rng, vec![fan_in, fan_out], std)),
            b: store.add_no_decay(format!("{name}.b"), Tensor::zeros(vec![1, fan_out])),
        }
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, s: &ParamStore<F>, x: Var) -> Result<Var, DiffError> {
        let w = t.param(s, self.w)?;
        let b = t.param(s, self.b)?;
        t.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            g: store.add_no_decay(format!("{name}.g"), Tensor::filled(vec![1, dim], F::one())),
            b: store.add_no_decay(format!("{name}.b"), Tensor::zeros(vec![1, dim])),
        }
    }

    pub fn forward<F: Real>(&self, t: &mut Tape<F>, s: &ParamStore<F>, x: Var) -> Result<Var, DiffError> {
        let g = t.param(s, self.g)?;
        let b = t.param(s, self.b)?;
        t.layer_norm(x, g, b)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    up: Linear,
    down: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        heads: usize,
        ffn_mult: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = 0.02;
        let resid_std = std / (2.0 * depth.max(1) as f64).sqrt();
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            q: Linear::new(store, &format!("{name}.attn.q"), d_model, d_model, std, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), d_model, d_model, std, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), d_model, d_model, std, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), d_model, d_model, resid_std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            up: Linear::new(store, &format!("{name}.mlp.up"), d_model, ffn_mult * d_model, std, rng),
            down: Linear::new(
                store,
                &format!("{name}.mlp.down"),
                ffn_mult * d_model,
                d_model,
                resid_std,
                rng,
            ),
            heads,
        }
    }

    /// Returns the block output and the attention node (for probability capture).
    pub fn forward<F: Real>(
        &self,
        t: &mut Tape<F>,
        s: &ParamStore<F>,
        x: Var,
        spec: AttnSpec,
    ) -> Result<(Var, Var), DiffError> {
        let h = self.ln1.forward(t, s, x)?;
        let q = self.q.forward(t, s, h)?;
        let k = self.k.forward(t, s, h)?;
        let v = self.v.forward(t, s, h)?;
        let a = t.attention(q, k, v, spec)?;
        let attn = a;
        let a = self.o.forward(t, s, a)?;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, s, x)?;
        let h = self.up.forward(t, s, h)?;
        let h = t.gelu(h)?;
        let h = self.down.forward(t, s, h)?;
        let x = t.add(x, h)?;
        Ok((x, attn))
    }
}
