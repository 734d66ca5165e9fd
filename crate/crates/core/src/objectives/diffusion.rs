//! Visual/embedding generator objectives and their samplers: DDPM
//! (epsilon prediction), EDM (preconditioned denoising) and flow matching
//! (linear path, velocity prediction).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ObjectiveError;
use crate::diffcore::{Real, Tape, Tensor, Var};
use crate::model::Denoiser;

fn gauss<F: Real>(rng: &mut impl Rng, n: usize) -> Vec<F> {
    (0..n).map(|_| F::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

fn check_rows<F: Real>(
    t: &Tape<F>,
    v: &Tensor<F>,
    cond: Var,
    n: usize,
    what: &str,
) -> Result<(usize, usize), ObjectiveError> {
    let (b, d) = v.dims2();
    if t.dims(cond).0 != b || n != b {
        return Err(ObjectiveError::Shape(format!(
            "{b} targets, {} condition rows, {n} {what}",
            t.dims(cond).0
        )));
    }
    if !v.is_finite() {
        return Err(ObjectiveError::Shape("non-finite target".into()));
    }
    Ok((b, d))
}

/// Linear beta schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpmSchedule {
    pub betas: Vec<f64>,
    /// `alpha_bar[t - 1] = prod_{s <= t} (1 - beta_s)`.
    pub alpha_bar: Vec<f64>,
}

impl Default for DdpmSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

impl DdpmSchedule {
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_1
                } else {
                    beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Time input fed to the network for step `t` in `1..=T`.
    pub fn time_input(&self, step: usize) -> f64 {
        step as f64 / self.steps() as f64
    }
}

/// DDPM epsilon-prediction loss with explicit steps (`1..=T`) and noise.
pub fn ddpm_loss_with<F: Real>(
    t: &mut Tape<F>,
    head: &dyn Denoiser<F>,
    v: &Tensor<F>,
    cond: Var,
    sched: &DdpmSchedule,
    steps: &[usize],
    eps: &[F],
) -> Result<Var, ObjectiveError> {
    let (b, d) = check_rows(t, v, cond, steps.len(), "steps")?;
    if eps.len() != b * d || steps.iter().any(|&s| s == 0 || s > sched.steps()) {
        return Err(ObjectiveError::Shape("noise size or step out of range".into()));
    }
    let mut x = vec![F::zero(); b * d];
    for i in 0..b {
        let ab = sched.alpha_bar[steps[i] - 1];
        let (s, n) = (F::lit(ab.sqrt()), F::lit((1.0 - ab).sqrt()));
        for j in 0..d {
            x[i * d + j] = s * v.data()[i * d + j] + n * eps[i * d + j];
        }
    }
    let xv = t.constant(&Tensor::matrix(b, d, x)?)?;
    let times: Vec<F> = steps.iter().map(|&s| F::lit(sched.time_input(s))).collect();
    let pred = head.predict(t, xv, cond, &times)?;
    let target = t.constant(&Tensor::matrix(b, d, eps.to_vec())?)?;
    Ok(t.mse(pred, target)?)
}

pub fn ddpm_loss<F: Real>(
    t: &mut Tape<F>,
    head: &dyn Denoiser<F>,
    v: &Tensor<F>,
    cond: Var,
    sched: &DdpmSchedule,
    rng: &mut impl Rng,
) -> Result<Var, ObjectiveError> {
    let (b, d) = v.dims2();
    let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = gauss(rng, b * d);
    ddpm_loss_with(t, head, v, cond, sched, &steps, &eps)
}

/// Ancestral sampling over `steps` evenly spaced training steps (respaced
/// betas, posterior variance). With `steps == T` this is the full chain.
pub fn ddpm_sample<F: Real>(
    head: &dyn Denoiser<F>,
    cond: &Tensor<F>,
    sched: &DdpmSchedule,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<F>, ObjectiveError> {
    let b = cond.dims2().0;
    let d = head.x_dim();
    let total = sched.steps();
    let n = steps.clamp(1, total);
    let taus: Vec<usize> = (1..=n)
        .map(|k| ((k * total) as f64 / n as f64).round() as usize)
        .collect();
    let mut x: Vec<F> = gauss(rng, b * d);
    for k in (0..n).rev() {
        let ab = sched.alpha_bar[taus[k] - 1];
        let ab_prev = if k == 0 { 1.0 } else { sched.alpha_bar[taus[k - 1] - 1] };
        let beta = 1.0 - ab / ab_prev;
        let mut t = Tape::inference();
        let xv = t.constant(&Tensor::matrix(b, d, x.clone())?)?;
        let cv = t.constant(cond)?;
        let eps = head.predict(&mut t, xv, cv, &vec![F::lit(sched.time_input(taus[k])); b])?;
        let eps = t.value(eps).to_vec();
        let c = F::lit(beta / (1.0 - ab).sqrt());
        let inv = F::lit(1.0 / (1.0 - beta).sqrt());
        let sd = F::lit((beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt());
        let noise: Vec<F> = if k > 0 {
            gauss(rng, b * d)
        } else {
            vec![F::zero(); b * d]
        };
        for i in 0..b * d {
            x[i] = (x[i] - c * eps[i]) * inv + sd * noise[i];
        }
    }
    Ok(Tensor::matrix(b, d, x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdmConfig {
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: 0.5,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

/// `(c_skip, c_out, c_in, c_noise)` at noise level `sigma`.
pub fn edm_precond(sigma: f64, sigma_data: f64) -> (f64, f64, f64, f64) {
    let s2 = sigma * sigma + sigma_data * sigma_data;
    (
        sigma_data * sigma_data / s2,
        sigma * sigma_data / s2.sqrt(),
        1.0 / s2.sqrt(),
        sigma.ln() / 4.0,
    )
}

/// Loss weight `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
pub fn edm_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Builds `D(x; sigma) = c_skip x + c_out head(c_in x, c, c_noise)` for each row.
fn edm_denoise<F: Real>(
    t: &mut Tape<F>,
    head: &dyn Denoiser<F>,
    x: &[F],
    cond: Var,
    sigmas: &[f64],
    cfg: &EdmConfig,
) -> Result<Var, ObjectiveError> {
    let b = sigmas.len();
    let d = x.len() / b.max(1);
    let mut input = vec![F::zero(); b * d];
    let mut skip = vec![F::zero(); b * d];
    let mut c_out = Vec::with_capacity(b);
    let mut c_noise = Vec::with_capacity(b);
    for (i, &s) in sigmas.iter().enumerate() {
        let (cs, co, ci, cn) = edm_precond(s, cfg.sigma_data);
        for j in 0..d {
            input[i * d + j] = F::lit(ci) * x[i * d + j];
            skip[i * d + j] = F::lit(cs) * x[i * d + j];
        }
        c_out.push(F::lit(co));
        c_noise.push(F::lit(cn));
    }
    let xin = t.constant(&Tensor::matrix(b, d, input)?)?;
    let f = head.predict(t, xin, cond, &c_noise)?;
    let co = t.constant(&Tensor::matrix(b, 1, c_out)?)?;
    let scaled = t.mul_col(f, co)?;
    let sk = t.constant(&Tensor::matrix(b, d, skip)?)?;
    Ok(t.add(scaled, sk)?)
}

/// EDM loss with explicit per-row noise levels and noise. Each row
/// contributes `lambda(sigma) * mean_j (D - v)_j^2`; rows are averaged.
pub fn edm_loss_with<F: Real>(
    t: &mut Tape<F>,
    head: &dyn Denoiser<F>,
    v: &Tensor<F>,
    cond: Var,
    cfg: &EdmConfig,
    sigmas: &[f64],
    eps: &[F],
) -> Result<Var, ObjectiveError> {
    let (b, d) = check_rows(t, v, cond, sigmas.len(), "noise levels")?;
    if let Some(&s) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(ObjectiveError::InvalidSigma(s));
    }
    if eps.len() != b * d {
        return Err(ObjectiveError::Shape("noise size".into()));
    }
    let x: Vec<F> = (0..b * d)
        .map(|k| v.data()[k] + F::lit(sigmas[k / d]) * eps[k])
        .collect();
    let den = edm_denoise(t, head, &x, cond, sigmas, cfg)?;
    let vv = t.constant(v)?;
    let diff = t.sub(den, vv)?;
    let sq = t.mul(diff, diff)?;
    let rows = t.row_sum(sq)?;
    let w: Vec<F> = sigmas
        .iter()
        .map(|&s| F::lit(edm_weight(s, cfg.sigma_data) / d as f64))
        .collect();
    let w = t.constant(&Tensor::matrix(b, 1, w)?)?;
    let weighted = t.mul(rows, w)?;
    Ok(t.mean(weighted)?)
}

pub fn edm_loss<F: Real>(
    t: &mut Tape<F>,
    head: &dyn Denoiser<F>,
    v: &Tensor<F>,
    cond: Var,
    cfg: &EdmConfig,
    rng: &mut impl Rng,
) -> Result<Var, ObjectiveError> {
    let (b, d) = v.dims2();
    let sigmas: Vec<f64> = (0..b)
        .map(|_| (cfg.p_mean + cfg.p_std * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let eps = gauss(rng, b * d);
    edm_loss_with(t, head, v, cond, cfg, &sigmas, &eps)
}

/// Heun sampler over the Karras noise schedule with `steps` levels.
pub fn edm_sample<F: Real>(
    head: &dyn Denoiser<F>,
    cond: &Tensor<F>,
    cfg: &EdmConfig,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<F>, ObjectiveError> {
    let b = cond.dims2().0;
    let d = head.x_dim();
    let n = steps.max(2);
    let (lo, hi) = (cfg.sigma_min.powf(1.0 / cfg.rho), cfg.sigma_max.powf(1.0 / cfg.rho));
    let mut sig: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(cfg.rho))
        .collect();
    sig.push(0.0);
    let denoise = |x: &[F], s: f64| -> Result<Vec<F>, ObjectiveError> {
        let mut t = Tape::inference();
        let cv = t.constant(cond)?;
        let out = edm_denoise(&mut t, head, x, cv, &vec![s; b], cfg)?;
        Ok(t.value(out).to_vec())
    };
    let mut x: Vec<F> = gauss::<F>(rng, b * d).into_iter().map(|z| z * F::lit(sig[0])).collect();
    for i in 0..n {
        let (s, s_next) = (sig[i], sig[i + 1]);
        let den = denoise(&x, s)?;
        let slope: Vec<F> = x.iter().zip(&den).map(|(&xi, &di)| (xi - di) / F::lit(s)).collect();
        let h = F::lit(s_next - s);
        let euler: Vec<F> = x.iter().zip(&slope).map(|(&xi, &k)| xi + h * k).collect();
        if s_next > 0.0 {
            let den2 = denoise(&euler, s_next)?;
            for k in 0..b * d {
                let slope2 = (euler[k] - den2[k]) / F::lit(s_next);
                x[k] += h * F::lit(0.5) * (slope[k] + slope2);
            }
        } else {
            x = euler;
        }
    }
    Ok(Tensor::matrix(b, d, x)?)
}

/// Flow-matching loss with explicit source noise `x0` and times in `[0, 1]`.
pub fn fm_loss_with<F: Real>(
    t: &mut Tape<F>,
    head: &dyn Denoiser<F>,
    v: &Tensor<F>,
    cond: Var,
    x0: &[F],
    times: &[F],
) -> Result<Var, ObjectiveError> {
    let (b, d) = check_rows(t, v, cond, times.len(), "times")?;
    if x0.len() != b * d {
        return Err(ObjectiveError::Shape("noise size".into()));
    }
    let mut xt = vec![F::zero(); b * d];
    let mut vel = vec![F::zero(); b * d];
    for k in 0..b * d {
        let tau = times[k / d];
        xt[k] = (F::one() - tau) * x0[k] + tau * v.data()[k];
        vel[k] = v.data()[k] - x0[k];
    }
    let xv = t.constant(&Tensor::matrix(b, d, xt)?)?;
    let pred = head.predict(t, xv, cond, times)?;
    let target = t.constant(&Tensor::matrix(b, d, vel)?)?;
    Ok(t.mse(pred, target)?)
}

pub fn fm_loss<F: Real>(
    t: &mut Tape<F>,
    head: &dyn Denoiser<F>,
    v: &Tensor<F>,
    cond: Var,
    rng: &mut impl Rng,
) -> Result<Var, ObjectiveError> {
    let (b, d) = v.dims2();
    let x0 = gauss(rng, b * d);
    let times: Vec<F> = (0..b).map(|_| F::lit(rng.random::<f64>())).collect();
    fm_loss_with(t, head, v, cond, &x0, &times)
}

/// Euler integration of the learned velocity from noise (`t = 0`) to data.
pub fn fm_sample<F: Real>(
    head: &dyn Denoiser<F>,
    cond: &Tensor<F>,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<F>, ObjectiveError> {
    let b = cond.dims2().0;
    let d = head.x_dim();
    let n = steps.max(1);
    let mut x: Vec<F> = gauss(rng, b * d);
    let dt = F::lit(1.0 / n as f64);
    for i in 0..n {
        let mut t = Tape::inference();
        let xv = t.constant(&Tensor::matrix(b, d, x.clone())?)?;
        let cv = t.constant(cond)?;
        let vel = head.predict(&mut t, xv, cv, &vec![F::lit(i as f64 / n as f64); b])?;
        for (xi, &vi) in x.iter_mut().zip(t.value(vel)) {
            *xi += dt * vi;
        }
    }
    Ok(Tensor::matrix(b, d, x)?)
}
