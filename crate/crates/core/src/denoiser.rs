//! Noise-prediction U-Net conditioned on the guidance map and the timestep.

use depthdiff_tensor::{Tensor, TensorError};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{add_channel_vector, Conv2d, GroupNorm, Linear, Module, ParamVisitor, Upsample2x, RELU_GAIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub depth_levels: usize,
    pub base_channels: usize,
    /// Group-norm groups.
    pub groups: usize,
    pub t_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { depth_levels: 3, base_channels: 32, groups: 8, t_embed_dim: 64 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_levels == 0 {
            return Err(Error::Config("depth_levels must be >= 1".into()));
        }
        if self.groups == 0 || !self.base_channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "base_channels {} not divisible by {} groups",
                self.base_channels, self.groups
            )));
        }
        if self.t_embed_dim == 0 || !self.t_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("t_embed_dim must be even, got {}", self.t_embed_dim)));
        }
        Ok(())
    }

    pub fn required_multiple(&self) -> usize {
        1 << self.depth_levels
    }
}

/// Sinusoidal features `[sin(t w_0) .. sin(t w_{d/2-1}), cos(t w_0) ..]`
/// with `w_i = 10000^(-i / (d/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("timestep embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = (-(i as f64) / half as f64 * 10000f64.ln()).exp();
        let phase = t as f64 * w;
        out[i] = phase.sin();
        out[half + i] = phase.cos();
    }
    Ok(out)
}

fn dim_error(msg: String) -> Error {
    Error::Tensor(TensorError::Dimension(msg))
}

/// Halves resolution and doubles channels: strided conv, then a conv block
/// whose output is concatenated with its input and mixed by a 1x1 conv, then
/// a residual conv block. The time embedding is added after the strided conv.
#[derive(Debug, Clone)]
pub struct DownBlock {
    pub down: Conv2d,
    pub t_proj: Linear,
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub mix: Conv2d,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
}

impl DownBlock {
    pub fn new(rng: &mut ChaCha8Rng, c: usize, groups: usize, t_dim: usize) -> Self {
        let c2 = 2 * c;
        DownBlock {
            down: Conv2d::new(rng, c, c2, 3, 2, 1.0),
            t_proj: Linear::new(rng, t_dim, c2, 1.0),
            norm1: GroupNorm::new(groups, c2),
            conv1: Conv2d::new(rng, c2, c2, 3, 1, RELU_GAIN),
            mix: Conv2d::new(rng, 2 * c2, c2, 1, 1, 1.0),
            norm2: GroupNorm::new(groups, c2),
            conv2: Conv2d::new(rng, c2, c2, 3, 1, 0.5),
        }
    }

    /// `x[N,C,H,W]`, `t_emb[N,t_dim]` -> `[N,2C,H/2,W/2]`.
    pub fn forward(&self, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(dim_error(format!("down block expects [N,C,H,W], got {s:?}")));
        }
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Config(format!("down block needs even spatial dims, got {}x{}", s[2], s[3])));
        }
        let x1 = add_channel_vector(&self.down.forward(x)?, &self.t_proj.forward(t_emb)?)?;
        let r = self.conv1.forward(&self.norm1.forward(&x1)?.silu()?)?;
        let m = self.mix.forward(&Tensor::concat(&[&x1, &r], 1)?)?;
        let r2 = self.conv2.forward(&self.norm2.forward(&m)?.silu()?)?;
        Ok(m.add(&r2)?)
    }
}

impl Module for DownBlock {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.scope("down", |v| self.down.visit_params(v));
        v.scope("t_proj", |v| self.t_proj.visit_params(v));
        v.scope("norm1", |v| self.norm1.visit_params(v));
        v.scope("conv1", |v| self.conv1.visit_params(v));
        v.scope("mix", |v| self.mix.visit_params(v));
        v.scope("norm2", |v| self.norm2.visit_params(v));
        v.scope("conv2", |v| self.conv2.visit_params(v));
    }
}

/// Doubles resolution and halves channels: transpose conv, concat with the
/// skip, then a normalized conv added back onto the upsampled features.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub up: Upsample2x,
    pub t_proj: Linear,
    pub norm: GroupNorm,
    pub conv: Conv2d,
}

impl UpBlock {
    pub fn new(rng: &mut ChaCha8Rng, c: usize, groups: usize, t_dim: usize) -> Self {
        UpBlock {
            up: Upsample2x::new(rng, c, c / 2),
            t_proj: Linear::new(rng, t_dim, c / 2, 1.0),
            norm: GroupNorm::new(groups, c),
            conv: Conv2d::new(rng, c, c / 2, 3, 1, 1.0),
        }
    }

    /// `x[N,C,H,W]`, `skip[N,C/2,2H,2W]` -> `[N,C/2,2H,2W]`.
    pub fn forward(&self, x: &Tensor, skip: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let (s, k) = (x.shape(), skip.shape());
        if s.len() != 4
            || k.len() != 4
            || k[0] != s[0]
            || 2 * k[1] != s[1]
            || k[2] != 2 * s[2]
            || k[3] != 2 * s[3]
        {
            return Err(dim_error(format!("up block: input {s:?} and skip {k:?} are incompatible")));
        }
        let u = add_channel_vector(&self.up.forward(x)?, &self.t_proj.forward(t_emb)?)?;
        let h = self.conv.forward(&self.norm.forward(&Tensor::concat(&[&u, skip], 1)?)?.silu()?)?;
        Ok(u.add(&h)?)
    }
}

impl Module for UpBlock {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.scope("up", |v| self.up.visit_params(v));
        v.scope("t_proj", |v| self.t_proj.visit_params(v));
        v.scope("norm", |v| self.norm.visit_params(v));
        v.scope("conv", |v| self.conv.visit_params(v));
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub cond_channels: usize,
    pub t_mlp1: Linear,
    pub t_mlp2: Linear,
    pub in_conv: Conv2d,
    pub downs: Vec<DownBlock>,
    pub ups: Vec<UpBlock>,
    pub out_norm: GroupNorm,
    pub out_conv: Conv2d,
}

impl Denoiser {
    pub fn new(rng: &mut ChaCha8Rng, config: &DenoiserConfig, cond_channels: usize) -> Result<Self> {
        config.validate()?;
        let (b, g, td) = (config.base_channels, config.groups, config.t_embed_dim);
        let downs = (0..config.depth_levels).map(|l| DownBlock::new(rng, b << l, g, td)).collect();
        let ups = (0..config.depth_levels).rev().map(|l| UpBlock::new(rng, b << (l + 1), g, td)).collect();
        Ok(Denoiser {
            config: config.clone(),
            cond_channels,
            t_mlp1: Linear::new(rng, td, td, 1.0),
            t_mlp2: Linear::new(rng, td, td, 1.0),
            in_conv: Conv2d::new(rng, 1 + cond_channels, b, 3, 1, 1.0),
            downs,
            ups,
            out_norm: GroupNorm::new(g, b),
            out_conv: Conv2d::zeros(b, 1, 3),
        })
    }

    fn time_features(&self, t: &[usize]) -> Result<Tensor> {
        let td = self.config.t_embed_dim;
        let mut data = Vec::with_capacity(t.len() * td);
        for &ti in t {
            data.extend(timestep_embedding(ti, td)?);
        }
        let e = Tensor::from_vec(&[t.len(), td], data)?;
        self.t_mlp2.forward(&self.t_mlp1.forward(&e)?.silu()?)
    }

    /// `ε_θ(z_t, t, cond)`. `t` holds one timestep for the whole batch or one
    /// per sample; `cond` has batch `N` or 1 (shared).
    pub fn predict_noise(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (zs, cs) = (z_t.shape(), cond.shape());
        if zs.len() != 4 || zs[1] != 1 {
            return Err(dim_error(format!("z_t must be [N,1,H,W], got {zs:?}")));
        }
        let n = zs[0];
        if cs.len() != 4 || cs[1] != self.cond_channels || cs[2..] != zs[2..] || (cs[0] != n && cs[0] != 1) {
            return Err(dim_error(format!("cond {cs:?} does not match z_t {zs:?}")));
        }
        let m = self.config.required_multiple();
        if zs[2] % m != 0 || zs[3] % m != 0 {
            return Err(Error::Config(format!("spatial dims {}x{} must be multiples of {m}", zs[2], zs[3])));
        }
        let ts: Vec<usize> = match t.len() {
            1 => vec![t[0]; n],
            len if len == n => t.to_vec(),
            len => return Err(dim_error(format!("{len} timesteps for batch {n}"))),
        };
        let cond = if cs[0] == n { cond.clone() } else { cond.expand(&[n, cs[1], cs[2], cs[3]])? };
        let t_emb = self.time_features(&ts)?;

        let mut x = self.in_conv.forward(&Tensor::concat(&[z_t, &cond], 1)?)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        for d in &self.downs {
            skips.push(x.clone());
            x = d.forward(&x, &t_emb)?;
        }
        for u in &self.ups {
            let skip = skips.pop().expect("one skip per level");
            x = u.forward(&x, &skip, &t_emb)?;
        }
        self.out_conv.forward(&self.out_norm.forward(&x)?.silu()?)
    }
}

impl Module for Denoiser {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.scope("t_mlp1", |v| self.t_mlp1.visit_params(v));
        v.scope("t_mlp2", |v| self.t_mlp2.visit_params(v));
        v.scope("in_conv", |v| self.in_conv.visit_params(v));
        for (i, d) in self.downs.iter_mut().enumerate() {
            v.scope(&format!("down{i}"), |v| d.visit_params(v));
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            v.scope(&format!("up{i}"), |v| u.visit_params(v));
        }
        v.scope("out_norm", |v| self.out_norm.visit_params(v));
        v.scope("out_conv", |v| self.out_conv.visit_params(v));
    }
}
