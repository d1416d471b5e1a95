//! Noise schedule, forward diffusion, DDIM reverse steps and the sampling loop.

use depthdiff_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, DepthNormalizer};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, purpose, stream};

/// Linear-beta variance schedule over `t_train` steps, indexed `0..t_train`.
///
/// `alpha_bars[t]` is the product of `alphas[0..=t]`. The reverse process
/// ends in a terminal clean state whose cumulative alpha is exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// DDIM eta used to fill `sigmas`.
    pub eta: f64,
    /// Std of the one-step (`t -> t-1`) reverse transition at `eta`;
    /// `sigmas[0]` is the step into the terminal state. All zero for eta = 0.
    pub sigmas: Vec<f64>,
    /// When set, DDIM clamps its clean-latent estimate to `[-c, c]` and
    /// re-derives the noise direction from the clamped estimate.
    #[serde(default)]
    pub clip_sample: Option<f64>,
}

impl NoiseSchedule {
    pub fn build(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train == 0 {
            return Err(Error::Config("schedule needs at least one training step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..t_train)
            .map(|i| {
                if t_train == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_train);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut s = NoiseSchedule { t_train, beta_start, beta_end, betas, alphas, alpha_bars, eta: 0.0, sigmas: vec![], clip_sample: None };
        s.set_eta(0.0)?;
        Ok(s)
    }

    /// Refills `sigmas` for the given DDIM eta.
    pub fn set_eta(&mut self, eta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Config(format!("eta must lie in [0,1], got {eta}")));
        }
        self.eta = eta;
        self.sigmas = (0..self.t_train)
            .map(|t| self.ddim_sigma(t, t.checked_sub(1), eta))
            .collect();
        Ok(())
    }

    /// Cumulative alpha at `t`, or 1 for the terminal state.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    /// DDIM transition std between `t` and `t_prev`.
    pub fn ddim_sigma(&self, t: usize, t_prev: Option<usize>, eta: f64) -> f64 {
        let (ab, ab_prev) = (self.alpha_bars[t], self.alpha_bar(t_prev));
        eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
    }

    /// Checks the schedule invariants (used on load).
    pub fn validate(&self) -> Result<()> {
        let n = self.t_train;
        if n == 0 || self.betas.len() != n || self.alphas.len() != n || self.alpha_bars.len() != n {
            return Err(Error::Format("schedule arrays do not match t_train".into()));
        }
        let mut prod = 1.0;
        for t in 0..n {
            let (b, a, ab) = (self.betas[t], self.alphas[t], self.alpha_bars[t]);
            if !(0.0 < b && b < 1.0) || a != 1.0 - b {
                return Err(Error::Format(format!("step {t}: beta {b} / alpha {a} inconsistent")));
            }
            prod *= a;
            if ((ab - prod) / prod).abs() > 1e-12 || !(0.0 < ab && ab < 1.0) {
                return Err(Error::Format(format!("step {t}: alpha_bar {ab} is not the cumulative product {prod}")));
            }
            if t > 0 && ab >= self.alpha_bars[t - 1] {
                return Err(Error::Format(format!("alpha_bar not strictly decreasing at step {t}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: NoiseSchedule = serde_json::from_str(text).map_err(|e| Error::Format(format!("schedule: {e}")))?;
        s.validate()?;
        Ok(s)
    }
}

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`, per sample when `t` has one
/// entry per batch row (or one entry for the whole tensor).
pub fn forward_diffuse(z0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
            "forward_diffuse: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        ))));
    }
    let per = per_sample_coeffs(z0, t, sched.t_train)?;
    let n = z0.shape().first().copied().unwrap_or(1);
    let chunk = if per { z0.numel() / n } else { z0.numel() };
    let mut a = Vec::with_capacity(z0.numel());
    let mut b = Vec::with_capacity(z0.numel());
    for i in 0..z0.numel() {
        let ab = sched.alpha_bars[t[if per { i / chunk } else { 0 }]];
        a.push(ab.sqrt());
        b.push((1.0 - ab).sqrt());
    }
    let a = Tensor::from_vec(z0.shape(), a)?;
    let b = Tensor::from_vec(z0.shape(), b)?;
    Ok(z0.mul(&a)?.add(&eps.mul(&b)?)?)
}

fn per_sample_coeffs(z: &Tensor, t: &[usize], t_train: usize) -> Result<bool> {
    if let Some(bad) = t.iter().find(|&&v| v >= t_train) {
        return Err(Error::Usage(format!("timestep {bad} outside [0, {t_train})")));
    }
    match t.len() {
        1 => Ok(false),
        n if z.ndim() > 0 && z.shape()[0] == n => Ok(true),
        n => Err(Error::Usage(format!("{n} timesteps for a batch of shape {:?}", z.shape()))),
    }
}

/// One DDIM update from `t` to `t_prev` (`None` is the terminal clean state).
///
/// `xi` supplies the fresh noise when `eta > 0` and is ignored otherwise.
pub fn ddim_step(
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    eta: f64,
    xi: Option<&Tensor>,
) -> Result<Tensor> {
    if t >= sched.t_train {
        return Err(Error::Usage(format!("timestep {t} outside [0, {})", sched.t_train)));
    }
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::Usage(format!("ddim_step needs t_prev < t, got {tp} >= {t}")));
        }
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0,1], got {eta}")));
    }
    if z_t.shape() != eps_pred.shape() {
        return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
            "ddim_step: z_t {:?} vs eps_pred {:?}",
            z_t.shape(),
            eps_pred.shape()
        ))));
    }
    let ab = sched.alpha_bars[t];
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = sched.ddim_sigma(t, t_prev, eta);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut z0_hat = z_t.sub(&eps_pred.mul_scalar((1.0 - ab).sqrt())?)?.mul_scalar(1.0 / ab.sqrt())?;
    let mut eps_dir = eps_pred.clone();
    if let Some(c) = sched.clip_sample {
        if z0_hat.data().iter().any(|v| v.abs() > c) {
            let clipped: Vec<f64> = z0_hat.data().iter().map(|v| v.clamp(-c, c)).collect();
            z0_hat = Tensor::from_vec(z0_hat.shape(), clipped)?;
            eps_dir = z_t.sub(&z0_hat.mul_scalar(ab.sqrt())?)?.mul_scalar(1.0 / (1.0 - ab).sqrt())?;
        }
    }
    let mut out = z0_hat.mul_scalar(ab_prev.sqrt())?.add(&eps_dir.mul_scalar(dir)?)?;
    if sigma > 0.0 {
        let xi = xi.ok_or_else(|| Error::Usage("eta > 0 needs a noise tensor".into()))?;
        out = out.add(&xi.mul_scalar(sigma)?)?;
    }
    Ok(out)
}

/// Mean of the reverse transition expressed through the noise prediction:
/// `mu = (z_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(alpha_t)`.
pub fn mean_from_noise(z_t: &Tensor, eps_pred: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let coef = sched.betas[t] / (1.0 - sched.alpha_bars[t]).sqrt();
    Ok(z_t.sub(&eps_pred.mul_scalar(coef)?)?.mul_scalar(1.0 / sched.alphas[t].sqrt())?)
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss(eps_true: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    if eps_true.shape() != eps_pred.shape() {
        return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
            "diffusion_loss: {:?} vs {:?}",
            eps_true.shape(),
            eps_pred.shape()
        ))));
    }
    Ok(eps_pred.sub(eps_true)?.square()?.mean()?)
}

/// Descending timesteps visited by `steps`-step sampling:
/// `floor(k (T-1) / (steps-1))` for `k = steps-1 .. 0`, deduplicated.
/// The step after the last entry goes to the terminal state.
pub fn step_grid(t_train: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    if steps == 1 {
        return Ok(vec![t_train - 1]);
    }
    let mut grid: Vec<usize> = (0..steps).rev().map(|k| k * (t_train - 1) / (steps - 1)).collect();
    grid.dedup();
    Ok(grid)
}

/// Runs the reverse process from seeded Gaussian noise of `shape` and returns
/// the final latent. `predict(z_t, t)` returns the noise estimate.
pub fn sample_latent(
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    shape: &[usize],
    steps: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let grid = step_grid(sched.t_train, steps)?;
    let n: usize = shape.iter().product();
    let mut z = Tensor::from_vec(shape, normal_vec(&mut stream(seed, &[purpose::SAMPLE_NOISE]), n))?;
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied();
        let eps = predict(&z, t)?;
        if eps.shape() != shape {
            return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
                "denoiser returned {:?} for latent {:?}",
                eps.shape(),
                shape
            ))));
        }
        let xi = if sched.eta > 0.0 {
            Some(Tensor::from_vec(shape, normal_vec(&mut stream(seed, &[purpose::DDIM_ETA, i as u64]), n))?)
        } else {
            None
        };
        z = ddim_step(&z, &eps, t, t_prev, sched, sched.eta, xi.as_ref())?;
    }
    Ok(z)
}

/// Samples a `[N,1,H,W]` latent and converts each batch row to meters.
pub fn sample(
    predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    batch: usize,
    dims: (usize, usize),
    steps: usize,
    seed: u64,
    sched: &NoiseSchedule,
    norm: &DepthNormalizer,
    min_depth: f64,
) -> Result<Vec<DepthMap>> {
    let (h, w) = dims;
    let z = sample_latent(predict, &[batch, 1, h, w], steps, seed, sched)?;
    latent_to_depth(&z, norm, min_depth)
}

pub fn latent_to_depth(z: &Tensor, norm: &DepthNormalizer, min_depth: f64) -> Result<Vec<DepthMap>> {
    let s = z.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    (0..n)
        .map(|i| {
            let vals: Vec<f64> = z.data()[i * h * w..(i + 1) * h * w].iter().map(|&v| norm.denormalize(v)).collect();
            DepthMap::from_prediction(h, w, &vals, min_depth)
        })
        .collect()
}

/// Normalized `[N,1,H,W]` latent from dense depth maps.
pub fn depth_to_latent(maps: &[&DepthMap], norm: &DepthNormalizer) -> Result<Tensor> {
    let (h, w) = maps[0].dims();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dims() != (h, w) {
            return Err(Error::Data(format!("latent batch mixes {:?} and {:?}", (h, w), m.dims())));
        }
        data.extend(m.meters().iter().map(|&d| norm.normalize(d)));
    }
    Ok(Tensor::from_vec(&[maps.len(), 1, h, w], data)?)
}
