use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::block::Linear;
use crate::diffcore::{DiffError, ParamStore, Real, Tape, Tensor, Var};

/// Sinusoidal features of a scalar time/noise level: `sin(w_k t), cos(w_k t)`
/// with frequencies spaced geometrically from 1 to 1000.
pub fn time_features<F: Real>(tau: F, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for k in 0..half {
        let w = if half > 1 {
            (1000f64.ln() * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let a = tau * F::lit(w);
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}

/// A network predicting a `x_dim` vector from a noisy input, a condition
/// vector and a per-row time value.
pub trait Denoiser<F: Real> {
    fn x_dim(&self) -> usize;

    /// `x: [B, x_dim]`, `cond: [B, cond_dim]`, `time.len() == B`.
    fn predict(&self, t: &mut Tape<F>, x: Var, cond: Var, time: &[F]) -> Result<Var, DiffError>;
}

/// Three-layer SiLU MLP over `[x | cond | time features]`.
#[derive(Debug, Clone)]
pub struct ConditionalMlp {
    layers: [Linear; 3],
    x_dim: usize,
    cond_dim: usize,
    time_dim: usize,
}

impl ConditionalMlp {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        x_dim: usize,
        cond_dim: usize,
        hidden: usize,
        time_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = x_dim + cond_dim + time_features;
        let std = |n: usize| (1.0 / n as f64).sqrt();
        let layers = [
            Linear::new(store, &format!("{name}.l0"), fan_in, hidden, std(fan_in), rng),
            Linear::new(store, &format!("{name}.l1"), hidden, hidden, std(hidden), rng),
            Linear::new(store, &format!("{name}.l2"), hidden, x_dim, std(hidden), rng),
        ];
        Self {
            layers,
            x_dim,
            cond_dim,
            time_dim: time_features,
        }
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn forward<F: Real>(
        &self,
        t: &mut Tape<F>,
        s: &ParamStore<F>,
        x: Var,
        cond: Var,
        time: &[F],
    ) -> Result<Var, DiffError> {
        let (b, xd) = t.dims(x);
        let (bc, cd) = t.dims(cond);
        if xd != self.x_dim || cd != self.cond_dim || bc != b || time.len() != b {
            return Err(DiffError::Shape {
                op: "conditional_mlp",
                detail: format!(
                    "x {b}x{xd}, cond {bc}x{cd}, {} times; expected x_dim {} cond_dim {}",
                    time.len(),
                    self.x_dim,
                    self.cond_dim
                ),
            });
        }
        let feats: Vec<F> = time.iter().flat_map(|&tau| time_features(tau, self.time_dim)).collect();
        let tf = t.constant(&Tensor::matrix(b, self.time_dim, feats)?)?;
        let h = t.concat_cols(&[x, cond, tf])?;
        let h = self.layers[0].forward(t, s, h)?;
        let h = t.silu(h)?;
        let h = self.layers[1].forward(t, s, h)?;
        let h = t.silu(h)?;
        self.layers[2].forward(t, s, h)
    }
}

/// A [`ConditionalMlp`] bound to a parameter store, optionally counting calls.
pub struct HeadRef<'a, F> {
    mlp: &'a ConditionalMlp,
    store: &'a ParamStore<F>,
    counter: Option<&'a AtomicU64>,
}

impl<'a, F: Real> HeadRef<'a, F> {
    pub fn new(mlp: &'a ConditionalMlp, store: &'a ParamStore<F>, counter: Option<&'a AtomicU64>) -> Self {
        Self { mlp, store, counter }
    }
}

impl<F: Real> Denoiser<F> for HeadRef<'_, F> {
    fn x_dim(&self) -> usize {
        self.mlp.x_dim
    }

    fn predict(&self, t: &mut Tape<F>, x: Var, cond: Var, time: &[F]) -> Result<Var, DiffError> {
        if let Some(c) = self.counter {
            c.fetch_add(1, Ordering::Relaxed);
        }
        self.mlp.forward(t, self.store, x, cond, time)
    }
}
