//! The full completion model: guidance extractor, denoiser and refiner
//! sharing one condition map, plus the noise schedule and depth scaling.

use depthdiff_tensor::{no_grad, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::SceneSample;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::depth::{densify_nearest, DepthMap, DepthNormalizer};
use crate::diffusion::{sample_latent, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceExtractor};
use crate::nn::{Module, ParamVisitor};
use crate::refiner::{DepthRefiner, RefineConfig};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub guidance: GuidanceConfig,
    pub denoiser: DenoiserConfig,
    pub refiner: RefineConfig,
    /// Latent scaling: `z = 2 d / d_max - 1`.
    pub d_max: f64,
    /// Completed depths are clamped to at least this value.
    pub min_depth: f64,
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Clamp applied to DDIM's clean-latent estimate while sampling.
    #[serde(default)]
    pub clip_sample: Option<f64>,
    /// Diffuse the offset of the depth latent from the latent of the
    /// nearest-valid-pixel fill instead of the latent itself.
    #[serde(default)]
    pub residual_latent: bool,
    /// The diffusion process runs on `latent_scale` times the (residual) latent.
    #[serde(default = "unit_scale")]
    pub latent_scale: f64,
    /// When set, the denoiser sees `z_t / sqrt(ᾱ_t s² + 1 - ᾱ_t)` with `s`
    /// this standard deviation of the diffused data.
    #[serde(default)]
    pub sigma_data: Option<f64>,
    /// What the denoiser network's output stands for; it is always converted
    /// to a noise estimate.
    #[serde(default)]
    pub prediction: Prediction,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    /// The noise `ε` itself.
    #[default]
    Noise,
    /// The clean latent `x̂`: `ε = (z_t - sqrt(ᾱ) x̂) / sqrt(1 - ᾱ)`.
    Sample,
    /// The velocity `v̂`: `ε = sqrt(1 - ᾱ) z_t + sqrt(ᾱ) v̂`.
    Velocity,
}

impl Prediction {
    /// `(skip, gain)` with `ε = skip * z_t + gain * output` at `ᾱ = alpha_bar`.
    pub fn noise_coefficients(self, alpha_bar: f64) -> (f64, f64) {
        let a = alpha_bar;
        match self {
            Prediction::Noise => (0.0, 1.0),
            Prediction::Sample => (1.0 / (1.0 - a).sqrt(), -(a / (1.0 - a)).sqrt()),
            Prediction::Velocity => ((1.0 - a).sqrt(), a.sqrt()),
        }
    }
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for ModelConfig {
    /// Small model for 64x64 synthetic scenes on one CPU core.
    fn default() -> Self {
        ModelConfig {
            guidance: GuidanceConfig {
                levels: 3,
                image_channels: 8,
                depth_channels: 8,
                d_model: 16,
                n_heads: 2,
                n_points: 4,
                cond_channels: 16,
                fill_channel: true,
            },
            denoiser: DenoiserConfig { depth_levels: 2, base_channels: 16, groups: 4, t_embed_dim: 32 },
            refiner: RefineConfig { kernels: vec![3, 5], steps: 6, instants: vec![1, 3, 6], normalize_weights: false },
            d_max: 10.0,
            min_depth: 0.1,
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            clip_sample: Some(4.0),
            residual_latent: true,
            latent_scale: 16.0,
            sigma_data: Some(1.0),
            prediction: Prediction::Velocity,
        }
    }
}

impl ModelConfig {
    /// Widths closer to road-scene scale (90 m depth range).
    pub fn kitti_scale() -> Self {
        ModelConfig {
            guidance: GuidanceConfig::default(),
            denoiser: DenoiserConfig::default(),
            refiner: RefineConfig::default(),
            d_max: 90.0,
            min_depth: 0.1,
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            clip_sample: Some(1.0),
            residual_latent: false,
            latent_scale: 1.0,
            sigma_data: None,
            prediction: Prediction::Noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.denoiser.validate()?;
        self.refiner.validate()?;
        DepthNormalizer::new(self.d_max)?;
        if self.clip_sample.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_sample must be positive".into()));
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            return Err(Error::Config("latent_scale must be positive".into()));
        }
        if self.sigma_data.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("sigma_data must be non-negative".into()));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.d_max) {
            return Err(Error::Config(format!("min_depth {} must lie in (0, d_max)", self.min_depth)));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        self.guidance.required_multiple().max(self.denoiser.required_multiple())
    }
}

/// Stacked network inputs for a batch.
#[derive(Debug, Clone)]
pub struct BatchInputs {
    /// `[N,3,H,W]`.
    pub image: Tensor,
    /// `[N,2,H,W]`: scaled sparse depth and validity mask.
    pub depth: Tensor,
}

#[derive(Debug, Clone)]
pub struct DepthModel {
    pub config: ModelConfig,
    pub guidance: GuidanceExtractor,
    pub denoiser: Denoiser,
    pub refiner: DepthRefiner,
    pub schedule: NoiseSchedule,
    pub normalizer: DepthNormalizer,
}

impl DepthModel {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[purpose::INIT]);
        let c = config.guidance.cond_channels;
        let mut schedule = NoiseSchedule::build(config.t_train, config.beta_start, config.beta_end)?;
        schedule.clip_sample = config.clip_sample;
        Ok(DepthModel {
            config: config.clone(),
            guidance: GuidanceExtractor::new(&mut rng, &config.guidance, config.d_max)?,
            denoiser: Denoiser::new(&mut rng, &config.denoiser, c)?,
            refiner: DepthRefiner::new(&mut rng, &config.refiner, c)?,
            schedule,
            normalizer: DepthNormalizer::new(config.d_max)?,
        })
    }

    pub fn inputs(&self, image: &[&crate::data::RgbImage], sparse: &[&DepthMap]) -> Result<BatchInputs> {
        if image.is_empty() || image.len() != sparse.len() {
            return Err(Error::Usage(format!("{} images with {} sparse maps", image.len(), sparse.len())));
        }
        let (h, w) = image[0].dims();
        let m = self.config.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!("input {h}x{w} must be a multiple of {m} on both sides")));
        }
        let mut data = Vec::with_capacity(image.len() * 3 * h * w);
        for (img, sp) in image.iter().zip(sparse) {
            if img.dims() != (h, w) || sp.dims() != (h, w) {
                return Err(Error::Data(format!(
                    "batch mixes sizes: image {:?}, sparse {:?}, expected {h}x{w}",
                    img.dims(),
                    sp.dims()
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(BatchInputs {
            image: Tensor::from_vec(&[image.len(), 3, h, w], data)?,
            depth: self.guidance.depth_pyramid.input_tensor(sparse)?,
        })
    }

    pub fn sample_inputs(&self, samples: &[&SceneSample]) -> Result<BatchInputs> {
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let sparse: Vec<_> = samples.iter().map(|s| &s.sparse).collect();
        self.inputs(&images, &sparse)
    }

    /// Guidance condition `[N, C_g, H, W]`.
    pub fn condition(&self, inputs: &BatchInputs) -> Result<Tensor> {
        Ok(self.guidance.forward(&inputs.image, &inputs.depth)?.cond)
    }

    /// Latent offset `[N,1,H,W]` the diffusion process works relative to:
    /// the latent of the nearest-valid-pixel fill in residual mode, else `None`.
    pub fn latent_base(&self, sparse: &[&DepthMap]) -> Result<Option<Tensor>> {
        if !self.config.residual_latent {
            return Ok(None);
        }
        let (h, w) = sparse.first().ok_or_else(|| Error::Usage("empty batch".into()))?.dims();
        let mut data = Vec::with_capacity(sparse.len() * h * w);
        for sp in sparse {
            let fill = densify_nearest(sp).ok_or_else(|| Error::Data("sparse map has no valid pixel".into()))?;
            data.extend(fill.meters().iter().map(|&v| self.normalizer.normalize(v)));
        }
        Ok(Some(Tensor::from_vec(&[sparse.len(), 1, h, w], data)?))
    }

    /// DDIM sampling of the depth latent given a condition and the base from
    /// [`Self::latent_base`]; returns meters `[N,1,H,W]` clamped to
    /// `[min_depth, d_max]`.
    pub fn sample_depth(&self, cond: &Tensor, base: Option<&Tensor>, steps: usize, eta: f64, seed: u64) -> Result<Tensor> {
        let s = cond.shape();
        let mut sched = self.schedule.clone();
        sched.set_eta(eta)?;
        let z = no_grad(|| {
            sample_latent(|z, t| self.predict_noise(z, &[t], cond), &[s[0], 1, s[2], s[3]], steps, seed, &sched)
        })?;
        self.latent_to_meters(&self.from_diffusion(&z, base)?)
    }

    /// `ε_θ` with the configured input scaling; `t` as in
    /// [`Denoiser::predict_noise`].
    pub fn predict_noise(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        if cfg.sigma_data.is_none() && cfg.prediction == Prediction::Noise {
            return self.denoiser.predict_noise(z_t, t, cond);
        }
        let n = z_t.shape().first().copied().unwrap_or(0);
        if t.is_empty() || (t.len() != 1 && t.len() != n) {
            return Err(Error::Usage(format!("{} timesteps for a batch of {n}", t.len())));
        }
        let ab = &self.schedule.alpha_bars;
        if let Some(&bad) = t.iter().find(|&&v| v >= ab.len()) {
            return Err(Error::Usage(format!("timestep {bad} outside [0, {})", ab.len())));
        }
        let plane = z_t.numel() / n.max(1);
        let per_elem = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            let v = (0..z_t.numel()).map(|i| f(ab[t[if t.len() == 1 { 0 } else { i / plane }]])).collect();
            Ok(Tensor::from_vec(z_t.shape(), v)?)
        };
        let input = match cfg.sigma_data {
            Some(sd) => z_t.mul(&per_elem(&|a| 1.0 / (a * sd * sd + 1.0 - a).sqrt())?)?,
            None => z_t.clone(),
        };
        let out = self.denoiser.predict_noise(&input, t, cond)?;
        if cfg.prediction == Prediction::Noise {
            return Ok(out);
        }
        let p = cfg.prediction;
        let skip = per_elem(&|a| p.noise_coefficients(a).0)?;
        let gain = per_elem(&|a| p.noise_coefficients(a).1)?;
        Ok(z_t.mul(&skip)?.add(&out.mul(&gain)?)?)
    }

    /// Maps a depth latent into the space the diffusion process runs in.
    pub fn to_diffusion(&self, z: &Tensor, base: Option<&Tensor>) -> Result<Tensor> {
        let r = match base {
            Some(b) => z.sub(b)?,
            None => z.clone(),
        };
        Ok(r.mul_scalar(self.config.latent_scale)?)
    }

    /// Inverse of [`Self::to_diffusion`].
    pub fn from_diffusion(&self, x: &Tensor, base: Option<&Tensor>) -> Result<Tensor> {
        let z = no_grad(|| x.mul_scalar(1.0 / self.config.latent_scale))?;
        Ok(match base {
            Some(b) => no_grad(|| z.add(b))?,
            None => z,
        })
    }

    pub fn latent_to_meters(&self, z: &Tensor) -> Result<Tensor> {
        let (lo, hi) = (self.config.min_depth, self.config.d_max);
        let data = z.data().iter().map(|&v| self.normalizer.denormalize(v).clamp(lo, hi)).collect();
        Ok(Tensor::from_vec(z.shape(), data)?)
    }

    pub fn meters_to_latent(&self, d: &Tensor) -> Result<Tensor> {
        let data = d.data().iter().map(|&v| self.normalizer.normalize(v)).collect();
        Ok(Tensor::from_vec(d.shape(), data)?)
    }

    /// One dense map per batch element, clamped to `min_depth`.
    pub fn to_depth_maps(&self, d: &Tensor) -> Result<Vec<DepthMap>> {
        let s = d.shape();
        let (h, w) = (s[2], s[3]);
        let plane = h * w;
        (0..s[0])
            .map(|i| DepthMap::from_prediction(h, w, &d.data()[i * plane..(i + 1) * plane], self.config.min_depth))
            .collect()
    }

    /// Guidance, sampling and (optionally) refinement for one scene.
    pub fn complete(
        &self,
        image: &crate::data::RgbImage,
        sparse: &DepthMap,
        steps: usize,
        eta: f64,
        seed: u64,
        refine: bool,
    ) -> Result<DepthMap> {
        no_grad(|| {
            let inputs = self.inputs(&[image], &[sparse])?;
            let cond = self.condition(&inputs)?;
            let base = self.latent_base(&[sparse])?;
            let mut d = self.sample_depth(&cond, base.as_ref(), steps, eta, seed)?;
            if refine {
                d = self.refiner.refine(&d, &cond, &[sparse])?;
            }
            Ok(self.to_depth_maps(&d)?.remove(0))
        })
    }

    /// Refinement only, on an existing dense estimate.
    pub fn refine_only(&self, image: &crate::data::RgbImage, sparse: &DepthMap, estimate: &DepthMap) -> Result<DepthMap> {
        no_grad(|| {
            let inputs = self.inputs(&[image], &[sparse])?;
            let cond = self.condition(&inputs)?;
            if estimate.dims() != sparse.dims() {
                return Err(Error::Data(format!("estimate {:?} vs sparse {:?}", estimate.dims(), sparse.dims())));
            }
            let d = self.refiner.refine(&estimate.to_tensor(), &cond, &[sparse])?;
            Ok(self.to_depth_maps(&d)?.remove(0))
        })
    }
}

impl Module for DepthModel {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.scope("guidance", |v| self.guidance.visit_params(v));
        v.scope("denoiser", |v| self.denoiser.visit_params(v));
        v.scope("refiner", |v| self.refiner.visit_params(v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_scene;

    #[test]
    fn exact_outputs_map_back_to_the_noise() {
        let (x0, eps) = (0.3, -1.2);
        for a in [0.9999f64, 0.7, 0.05] {
            let z = a.sqrt() * x0 + (1.0 - a).sqrt() * eps;
            let v = a.sqrt() * eps - (1.0 - a).sqrt() * x0;
            for (p, out) in [(Prediction::Noise, eps), (Prediction::Sample, x0), (Prediction::Velocity, v)] {
                let (skip, gain) = p.noise_coefficients(a);
                assert!((skip * z + gain * out - eps).abs() < 1e-9, "{p:?} at {a}");
            }
        }
    }

    #[test]
    fn tiny_model_completes_a_scene() {
        let mut cfg = ModelConfig::default();
        cfg.refiner = RefineConfig { kernels: vec![3], steps: 2, instants: vec![1, 2], normalize_weights: false };
        let model = DepthModel::new(&cfg, 0).unwrap();
        let mut s = synth_scene(1, 32, 32).unwrap();
        s.sparse = crate::data::sparsify(&s.dense_gt, crate::data::SparsePattern::Uniform { p: 0.1 }, 1).unwrap();
        let d = model.complete(&s.image, &s.sparse, 3, 0.0, 5, true).unwrap();
        assert_eq!(d.dims(), (32, 32));
        assert_eq!(d.n_valid(), 32 * 32);
        assert!(d.meters().iter().all(|v| *v >= cfg.min_depth));
        assert_eq!(d, model.complete(&s.image, &s.sparse, 3, 0.0, 5, true).unwrap());
    }

    #[test]
    fn distinct_seeds_give_distinct_weights() {
        let cfg = ModelConfig::default();
        let mut a = DepthModel::new(&cfg, 1).unwrap();
        let mut b = DepthModel::new(&cfg, 2).unwrap();
        let mut wa = Vec::new();
        a.visit_params(&mut ParamVisitor::new(&mut |_, t| wa.extend(t.to_vec())));
        let mut wb = Vec::new();
        b.visit_params(&mut ParamVisitor::new(&mut |_, t| wb.extend(t.to_vec())));
        assert_eq!(wa.len(), wb.len());
        assert_ne!(wa, wb);
    }
}
