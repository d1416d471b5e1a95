//! Deformable spatial-propagation refinement of a dense depth estimate.
//!
//! For every kernel size `k` an independent chain runs `steps` iterations of
//! `D <- anchor(propagate(D))`, where `propagate` gathers the pixel itself
//! plus `k^2 - 1` offset neighbours with learned weights and `anchor` blends
//! toward the sparse measurements. Snapshots at the selected instants are
//! combined with per-pixel softmax weights over kernels and over instants.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use depthdiff_tensor::{Tensor, TensorError};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, ParamVisitor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub kernels: Vec<usize>,
    pub steps: usize,
    /// 1-based iteration indices whose states are combined.
    pub instants: Vec<usize>,
    /// Divide the gathered weights by their sum (off by default).
    pub normalize_weights: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { kernels: vec![3, 5, 7], steps: 12, instants: vec![1, 6, 12], normalize_weights: false }
    }
}

impl RefineConfig {
    /// Begin, middle and end instants for `steps` iterations.
    pub fn default_instants(steps: usize) -> Vec<usize> {
        let mut v = vec![1, steps.div_ceil(2), steps];
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() || self.instants.is_empty() {
            return Err(Error::Config("refiner needs at least one kernel and one instant".into()));
        }
        if let Some(k) = self.kernels.iter().find(|k| **k < 3 || **k % 2 == 0) {
            return Err(Error::Config(format!("kernel size {k} must be odd and >= 3")));
        }
        if let Some(t) = self.instants.iter().find(|t| **t == 0 || **t > self.steps) {
            return Err(Error::Config(format!("instant {t} outside 1..={}", self.steps)));
        }
        let mut seen = self.kernels.clone();
        seen.sort_unstable();
        seen.dedup();
        let mut inst = self.instants.clone();
        inst.sort_unstable();
        inst.dedup();
        if seen.len() != self.kernels.len() || inst.len() != self.instants.len() {
            return Err(Error::Config("kernels and instants must not repeat".into()));
        }
        Ok(())
    }
}

/// Per-kernel propagation parameters for a batch.
#[derive(Debug, Clone)]
pub struct KernelParams {
    pub k: usize,
    /// `[N, 2(k^2-1), H, W]`; channel `2(j-1) + {0: x, 1: y}` for neighbour `j`.
    pub offsets: Tensor,
    /// `[N, k^2, H, W]` in (0,1); channel 0 is the reference pixel itself.
    pub weights: Tensor,
    /// `[N, 1, H, W]` in (0,1).
    pub lambda: Tensor,
}

#[derive(Debug, Clone)]
pub struct RefinementParams {
    pub kernels: Vec<KernelParams>,
    /// `[N, |K|, H, W]`, softmax over kernels.
    pub mu: Tensor,
    /// `[N, |T|, H, W]`, softmax over instants.
    pub phi: Tensor,
}

impl RefinementParams {
    pub fn kernel(&self, k: usize) -> Result<&KernelParams> {
        self.kernels.iter().find(|p| p.k == k).ok_or_else(|| Error::Usage(format!("no parameters for kernel {k}")))
    }
}

/// Regular `k x k` neighbour displacements excluding the centre, row-major.
pub fn neighbour_grid(k: usize) -> Vec<(f64, f64)> {
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(k * k - 1);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx != 0 || dy != 0 {
                out.push((dx as f64, dy as f64));
            }
        }
    }
    out
}

/// Sampling coordinates `[H*W*k^2, 2]` of one batch element: per pixel the
/// reference point followed by each grid neighbour shifted by its offset.
pub fn sampling_coords(offsets: &Tensor, b: usize, k: usize) -> Result<Tensor> {
    let s = offsets.shape();
    let (h, w) = (s[2], s[3]);
    let nb = k * k - 1;
    let q = h * w;
    let mut base = Vec::with_capacity(q * k * k * 2);
    let grid = neighbour_grid(k);
    for y in 0..h {
        for x in 0..w {
            base.push(x as f64);
            base.push(y as f64);
            for (dx, dy) in &grid {
                base.push(x as f64 + dx);
                base.push(y as f64 + dy);
            }
        }
    }
    let base = Tensor::from_vec(&[q, k * k, 2], base)?;
    // [1, 2nb, H, W] -> [q, nb, 2], then a zero offset for the reference slot.
    let off = offsets.narrow(0, b, 1)?.reshape(&[nb, 2, q])?.permute(&[2, 0, 1])?;
    let off = Tensor::concat(&[&Tensor::zeros(&[q, 1, 2]), &off], 1)?;
    Ok(base.add(&off)?.reshape(&[q * k * k, 2])?)
}

/// One gather step for a single kernel: `D_i <- Σ_j W_ij D(p_j)`.
/// `coords` are the per-element outputs of [`sampling_coords`].
pub fn propagate_step(d_prev: &Tensor, params: &KernelParams, coords: &[Tensor], normalize: bool) -> Result<Tensor> {
    let s = d_prev.shape();
    if s.len() != 4 || s[1] != 1 || params.weights.shape()[2..] != s[2..] || params.weights.shape()[0] != s[0] {
        return Err(Error::Tensor(TensorError::Dimension(format!(
            "propagate_step: depth {s:?} vs weights {:?}",
            params.weights.shape()
        ))));
    }
    if coords.len() != s[0] {
        return Err(Error::Usage(format!("{} coordinate sets for batch {}", coords.len(), s[0])));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let kk = params.k * params.k;
    let q = h * w;
    let mut outs = Vec::with_capacity(n);
    for (b, c) in coords.iter().enumerate() {
        let feat = d_prev.narrow(0, b, 1)?.reshape(&[1, h, w])?;
        let sampled = feat.bilinear_sample(c)?.reshape(&[q, kk])?;
        let wts = params.weights.narrow(0, b, 1)?.reshape(&[kk, q])?.permute(&[1, 0])?;
        let mut v = sampled.mul(&wts)?.sum_axis(1)?;
        if normalize {
            v = v.mul(&wts.sum_axis(1)?.recip()?)?;
        }
        outs.push(v.reshape(&[1, 1, h, w])?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    Ok(Tensor::concat(&refs, 0)?)
}

/// `(1 - λ m) D + λ m D_s`: pixels without a measurement are untouched.
pub fn anchor_sparse(d: &Tensor, sparse: &Tensor, mask: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    let lm = lambda.mul(mask)?;
    let keep = lm.neg()?.add_scalar(1.0)?;
    Ok(keep.mul(d)?.add(&lm.mul(sparse)?)?)
}

#[derive(Debug, Clone)]
struct KernelHeads {
    k: usize,
    offset: Conv2d,
    weight: Conv2d,
    lambda: Conv2d,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone)]
pub struct DepthRefiner {
    pub config: RefineConfig,
    heads: Vec<KernelHeads>,
    pub mu_head: Conv2d,
    pub phi_head: Conv2d,
    calls: Arc<AtomicUsize>,
}

impl DepthRefiner {
    pub fn new(rng: &mut ChaCha8Rng, config: &RefineConfig, cond_channels: usize) -> Result<Self> {
        config.validate()?;
        let c = cond_channels;
        let heads = config
            .kernels
            .iter()
            .map(|&k| {
                let kk = k * k;
                let mut weight = Conv2d::new(rng, c, kk, 3, 1, 0.1);
                // Start close to the identity: most mass on the reference pixel.
                let mut b = vec![logit(0.1 / (kk - 1) as f64); kk];
                b[0] = logit(0.9);
                weight.bias = Tensor::param(&[kk], b).expect("finite");
                KernelHeads {
                    k,
                    offset: Conv2d::zeros(c, 2 * (kk - 1), 3),
                    weight,
                    lambda: Conv2d::new(rng, c, 1, 3, 1, 0.1),
                }
            })
            .collect();
        Ok(DepthRefiner {
            config: config.clone(),
            heads,
            mu_head: Conv2d::new(rng, c, config.kernels.len(), 3, 1, 0.1),
            phi_head: Conv2d::new(rng, c, config.instants.len(), 3, 1, 0.1),
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Number of [`DepthRefiner::refine`] invocations (shared across clones).
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn predict_params(&self, cond: &Tensor) -> Result<RefinementParams> {
        let kernels = self
            .heads
            .iter()
            .map(|h| {
                Ok(KernelParams {
                    k: h.k,
                    offsets: h.offset.forward(cond)?,
                    weights: h.weight.forward(cond)?.sigmoid()?,
                    lambda: h.lambda.forward(cond)?.sigmoid()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RefinementParams {
            kernels,
            mu: self.mu_head.forward(cond)?.softmax(1)?,
            phi: self.phi_head.forward(cond)?.softmax(1)?,
        })
    }

    /// Runs every kernel chain on `d0[N,1,H,W]` (meters) and combines the
    /// snapshots. `sparse`/`mask` are `[N,1,H,W]`.
    pub fn refine_with(
        &self,
        d0: &Tensor,
        sparse: &Tensor,
        mask: &Tensor,
        params: &RefinementParams,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let n = d0.shape()[0];
        let mut out: Option<Tensor> = None;
        for (ki, &k) in cfg.kernels.iter().enumerate() {
            let kp = params.kernel(k)?;
            let coords: Vec<Tensor> = (0..n).map(|b| sampling_coords(&kp.offsets, b, k)).collect::<Result<_>>()?;
            let mu_k = params.mu.narrow(1, ki, 1)?;
            let mut d = d0.clone();
            for step in 1..=cfg.steps {
                d = anchor_sparse(&propagate_step(&d, kp, &coords, cfg.normalize_weights)?, sparse, mask, &kp.lambda)?;
                if let Some(ti) = cfg.instants.iter().position(|t| *t == step) {
                    let term = d.mul(&mu_k.mul(&params.phi.narrow(1, ti, 1)?)?)?;
                    out = Some(match out {
                        Some(o) => o.add(&term)?,
                        None => term,
                    });
                }
            }
        }
        Ok(out.expect("validated config has kernels and instants"))
    }

    /// Refines `d0` (meters, `[N,1,H,W]`) given the condition map and the
    /// sparse measurements.
    pub fn refine(&self, d0: &Tensor, cond: &Tensor, sparse: &[&DepthMap]) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let s = d0.shape();
        if s.len() != 4 || s[1] != 1 || sparse.len() != s[0] {
            return Err(Error::Tensor(TensorError::Dimension(format!(
                "refine: depth {s:?} with {} sparse maps",
                sparse.len()
            ))));
        }
        let (h, w) = (s[2], s[3]);
        if cond.shape().len() != 4 || cond.shape()[0] != s[0] || cond.shape()[2..] != s[2..] {
            return Err(Error::Tensor(TensorError::Dimension(format!(
                "refine: cond {:?} vs depth {s:?}",
                cond.shape()
            ))));
        }
        let mut sv = Vec::with_capacity(s[0] * h * w);
        let mut mv = Vec::with_capacity(s[0] * h * w);
        for m in sparse {
            if m.dims() != (h, w) {
                return Err(Error::Data(format!("sparse map {:?} does not match {h}x{w}", m.dims())));
            }
            sv.extend_from_slice(m.meters());
            mv.extend(m.mask_f64());
        }
        let sparse_t = Tensor::from_vec(s, sv)?;
        let mask_t = Tensor::from_vec(s, mv)?;
        let params = self.predict_params(cond)?;
        self.refine_with(d0, &sparse_t, &mask_t, &params)
    }
}

impl Module for DepthRefiner {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        for h in &mut self.heads {
            v.scope(&format!("k{}", h.k), |v| {
                v.scope("offset", |v| h.offset.visit_params(v));
                v.scope("weight", |v| h.weight.visit_params(v));
                v.scope("lambda", |v| h.lambda.visit_params(v));
            });
        }
        v.scope("mu", |v| self.mu_head.visit_params(v));
        v.scope("phi", |v| self.phi_head.visit_params(v));
    }
}
