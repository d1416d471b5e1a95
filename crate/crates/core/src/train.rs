//! Joint training of the guidance extractor, denoiser and refiner.
//!
//! The diffusion target `z₀` of each scene lives in a bank of detached
//! latents. Epoch 1 fills it from nearest-valid-pixel densification of the
//! sparse input; every later epoch starts by replacing it with the model's
//! own completion of that scene (sampling, then refinement when the map loss
//! is active). The map loss refines a fresh sample of the current model.

use depthdiff_tensor::{no_grad, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::Manifest;
use crate::data::SceneSample;
use crate::depth::{densify_nearest, DepthMap};
use crate::diffusion::{diffusion_loss, forward_diffuse};
use crate::error::{Error, ErrorKind, Result};
use crate::loss::{map_loss, total_loss};
use crate::model::DepthModel;
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::rng::{derive_seed, normal_vec, purpose, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub adamw: AdamWConfig,
    /// Weight of the diffusion loss.
    pub gamma1: f64,
    /// Weight of the refined-depth map loss; 0 disables the refiner.
    pub gamma2: f64,
    /// DDIM steps used when regenerating the diffusion targets.
    pub sample_steps: usize,
    /// The map loss is evaluated every this many optimizer steps.
    pub map_every: usize,
    pub eta: f64,
    pub seed: u64,
    /// Keep a scene's previous target when the regenerated one has a higher
    /// map loss against ground truth.
    #[serde(default)]
    pub gate_refresh: bool,
}

impl Default for TrainConfig {
    /// Desk-scale run.
    fn default() -> Self {
        TrainConfig {
            epochs: 16,
            batch: 4,
            lr: LrSchedule::default(),
            adamw: AdamWConfig::default(),
            gamma1: 1.0,
            gamma2: 1.0,
            sample_steps: 5,
            map_every: 4,
            eta: 0.0,
            seed: 0,
            gate_refresh: true,
        }
    }
}

impl TrainConfig {
    pub fn kitti_scale() -> Self {
        TrainConfig { epochs: 30, batch: 16, sample_steps: 20, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.epochs == 0 || self.batch == 0 || self.map_every == 0 || self.sample_steps == 0 {
            return Err(Error::Config("epochs, batch, map_every and sample_steps must be >= 1".into()));
        }
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub l_diff: f64,
    pub l_map: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_l_diff: f64,
    pub mean_l_map: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// State carried between epochs.
pub struct Trainer<'a> {
    pub model: DepthModel,
    pub config: TrainConfig,
    samples: &'a [SceneSample],
    order_source: Manifest,
    /// Detached diffusion targets, one `[1,1,H,W]` latent per scene.
    bank: Vec<Tensor>,
    optimizer: AdamW,
    pub epoch: usize,
    pub step: u64,
}

fn bootstrap_target(s: &SceneSample) -> Result<DepthMap> {
    densify_nearest(&s.sparse).ok_or_else(|| Error::Data(format!("sample {} has no valid sparse pixel", s.id)))
}

impl<'a> Trainer<'a> {
    pub fn new(model: DepthModel, config: &TrainConfig, samples: &'a [SceneSample]) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let dims = samples[0].dims();
        for s in samples {
            s.validate()?;
            if s.dims() != dims {
                return Err(Error::Data(format!("sample {} is {:?}, expected {:?}", s.id, s.dims(), dims)));
            }
        }
        let mut bank = Vec::with_capacity(samples.len());
        for s in samples {
            bank.push(model.meters_to_latent(&bootstrap_target(s)?.to_tensor())?);
        }
        let order_source = Manifest {
            entries: samples
                .iter()
                .enumerate()
                .map(|(i, s)| crate::data::manifest::ManifestEntry {
                    id: s.id.clone(),
                    image: Default::default(),
                    sparse: Default::default(),
                    gt: Default::default(),
                    line: i + 1,
                })
                .collect(),
        };
        Ok(Trainer {
            model,
            config: config.clone(),
            samples,
            order_source,
            bank,
            optimizer: AdamW::new(config.adamw),
            epoch: 0,
            step: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.config.batch)
    }

    /// Current diffusion target of scene `i`, in meters.
    pub fn target(&self, i: usize) -> Result<Tensor> {
        self.model.latent_to_meters(&self.bank[i])
    }

    /// Regenerates every diffusion target from the current model.
    fn refresh_bank(&mut self) -> Result<()> {
        let model = &self.model;
        let cfg = &self.config;
        let idx: Vec<usize> = (0..self.samples.len()).collect();
        let mut fresh = Vec::with_capacity(self.samples.len());
        for (c, chunk) in idx.chunks(cfg.batch).enumerate() {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &self.samples[i]).collect();
            let d = no_grad(|| -> Result<Tensor> {
                let cond = model.condition(&model.sample_inputs(&batch)?)?;
                let seed = derive_seed(cfg.seed, &[purpose::SAMPLE_NOISE, self.epoch as u64, c as u64]);
                let sparse: Vec<&DepthMap> = batch.iter().map(|s| &s.sparse).collect();
                let base = model.latent_base(&sparse)?;
                let d = model.sample_depth(&cond, base.as_ref(), cfg.sample_steps, cfg.eta, seed)?;
                if cfg.gamma2 > 0.0 {
                    let r = model.refiner.refine(&d, &cond, &sparse)?;
                    let (lo, hi) = (model.config.min_depth, model.config.d_max);
                    Ok(Tensor::from_vec(r.shape(), r.data().iter().map(|v| v.clamp(lo, hi)).collect())?)
                } else {
                    Ok(d)
                }
            })?;
            let z = model.meters_to_latent(&d)?;
            let plane = z.numel() / chunk.len();
            let s = z.shape();
            for (j, &i) in chunk.iter().enumerate() {
                let cand = Tensor::from_vec(&[1, 1, s[2], s[3]], z.data()[j * plane..(j + 1) * plane].to_vec())?;
                let keep_old = cfg.gate_refresh && {
                    let gt = &self.samples[i].dense_gt;
                    let old = map_loss(&model.latent_to_meters(&self.bank[i])?, &[gt])?.item();
                    let new = map_loss(&model.latent_to_meters(&cand)?, &[gt])?.item();
                    new >= old
                };
                fresh.push(if keep_old { self.bank[i].clone() } else { cand });
            }
        }
        self.bank = fresh;
        Ok(())
    }

    fn train_step(&mut self, batch_idx: &[usize], step_in_epoch: usize) -> Result<StepRecord> {
        let cfg = self.config.clone();
        let lr = cfg.lr.lr_at(self.epoch, step_in_epoch, self.steps_per_epoch());
        let batch: Vec<&SceneSample> = batch_idx.iter().map(|&i| &self.samples[i]).collect();
        let n = batch.len();
        let t_train = self.model.schedule.t_train;
        let mut t_rng = stream(cfg.seed, &[purpose::TRAIN_T, self.step]);
        let ts: Vec<usize> = (0..n).map(|_| t_rng.random_range(0..t_train)).collect();
        let refs: Vec<&Tensor> = batch_idx.iter().map(|&i| &self.bank[i]).collect();
        let z0 = Tensor::concat(&refs, 0)?;
        let eps = Tensor::from_vec(z0.shape(), normal_vec(&mut stream(cfg.seed, &[purpose::TRAIN_EPS, self.step]), z0.numel()))?;
        let with_map = cfg.gamma2 > 0.0 && self.step.is_multiple_of(cfg.map_every as u64);

        let (epoch, step) = (self.epoch, self.step);
        let diag = |e: Error, l_diff: Option<f64>| -> Error {
            if e.kind() == ErrorKind::Numeric {
                Error::Numeric(format!("training step {step} (epoch {epoch}, t={ts:?}, l_diff={l_diff:?}): {e}"))
            } else {
                e
            }
        };

        let model = &self.model;
        let cond = model.condition(&model.sample_inputs(&batch)?).map_err(|e| diag(e, None))?;
        let sparse: Vec<&DepthMap> = batch.iter().map(|s| &s.sparse).collect();
        let base = model.latent_base(&sparse)?;
        let target = model.to_diffusion(&z0, base.as_ref())?;
        let z_t = forward_diffuse(&target, &ts, &eps, &model.schedule)?;
        let eps_pred = model.predict_noise(&z_t, &ts, &cond).map_err(|e| diag(e, None))?;
        let l_diff = diffusion_loss(&eps, &eps_pred).map_err(|e| diag(e, None))?;
        let l_diff_v = l_diff.item();
        let (loss, l_map_v) = if with_map {
            let seed = derive_seed(cfg.seed, &[purpose::MAP_SAMPLE, step]);
            let d0 = model.sample_depth(&cond, base.as_ref(), cfg.sample_steps, cfg.eta, seed)?;
            let gt: Vec<&DepthMap> = batch.iter().map(|s| &s.dense_gt).collect();
            let refined = model.refiner.refine(&d0, &cond, &sparse).map_err(|e| diag(e, Some(l_diff_v)))?;
            let l_map = map_loss(&refined, &gt).map_err(|e| diag(e, Some(l_diff_v)))?;
            let v = l_map.item();
            (total_loss(&l_diff, &l_map, cfg.gamma1, cfg.gamma2)?, Some(v))
        } else {
            (l_diff.mul_scalar(cfg.gamma1)?, None)
        };
        let total = loss.item();
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "training step {step} (epoch {epoch}, t={ts:?}): loss {total} (l_diff={l_diff_v}, l_map={l_map_v:?})"
            )));
        }
        loss.backward().map_err(|e| diag(e.into(), Some(l_diff_v)))?;
        self.optimizer.step(&mut self.model, lr);
        self.step += 1;
        Ok(StepRecord { epoch, step, lr, l_diff: l_diff_v, l_map: l_map_v, total })
    }

    /// Runs one epoch (1-based numbering) and returns its records.
    pub fn run_epoch(&mut self) -> Result<(EpochSummary, Vec<StepRecord>)> {
        self.epoch += 1;
        if self.epoch > 1 {
            self.refresh_bank()?;
        }
        let batches = self.order_source.batches(self.config.batch, Some(self.config.seed), self.epoch as u64)?;
        let mut records = Vec::with_capacity(batches.len());
        for (i, b) in batches.iter().enumerate() {
            records.push(self.train_step(b, i)?);
        }
        let k = records.len() as f64;
        let maps: Vec<f64> = records.iter().filter_map(|r| r.l_map).collect();
        let summary = EpochSummary {
            epoch: self.epoch,
            steps: records.len(),
            mean_l_diff: records.iter().map(|r| r.l_diff).sum::<f64>() / k,
            mean_l_map: (!maps.is_empty()).then(|| maps.iter().sum::<f64>() / maps.len() as f64),
        };
        Ok((summary, records))
    }
}

/// Trains for `config.epochs` epochs. `on_epoch` sees the model after each
/// epoch (for checkpointing or logging).
pub fn train(
    model: DepthModel,
    config: &TrainConfig,
    samples: &[SceneSample],
    mut on_epoch: impl FnMut(&Trainer<'_>, &EpochSummary) -> Result<()>,
) -> Result<(DepthModel, TrainReport)> {
    let mut trainer = Trainer::new(model, config, samples)?;
    let mut report = TrainReport::default();
    for _ in 0..config.epochs {
        let (summary, records) = trainer.run_epoch()?;
        on_epoch(&trainer, &summary)?;
        report.steps.extend(records);
        report.epochs.push(summary);
    }
    Ok((trainer.model, report))
}
