//! Guidance feature extraction: residual image encoder, sparse-depth feature
//! pyramid, deformable self/cross attention and the final fusion into the
//! condition map handed to the denoiser and the refiner.

use depthdiff_tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Module, ParamVisitor, RELU_GAIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Pyramid levels; level `l` is at `1/2^l` resolution.
    pub levels: usize,
    /// Image encoder channels at level 0 (doubling per level).
    pub image_channels: usize,
    pub depth_channels: usize,
    /// Attention width.
    pub d_model: usize,
    pub n_heads: usize,
    pub n_points: usize,
    /// Channels of the fused condition map.
    pub cond_channels: usize,
    /// Adds the nearest-valid-pixel fill of the sparse map as a third depth
    /// input channel.
    #[serde(default)]
    pub fill_channel: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            levels: 3,
            image_channels: 16,
            depth_channels: 16,
            d_model: 32,
            n_heads: 2,
            n_points: 4,
            cond_channels: 32,
            fill_channel: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.n_points == 0 || self.n_heads == 0 {
            return Err(Error::Config("levels, n_points and n_heads must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    /// Spatial divisibility the pyramid needs.
    pub fn required_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// All intermediate guidance features for a batch.
#[derive(Debug, Clone)]
pub struct GuidanceFeatures {
    /// Image encoder outputs per level, `[N, C 2^l, H/2^l, W/2^l]`.
    pub image_scales: Vec<Tensor>,
    /// Depth pyramid outputs (top-down merged) per level.
    pub depth_scales: Vec<Tensor>,
    /// Self-attention enhanced image features, aggregated to full resolution.
    pub f_self: Tensor,
    /// Depth-queried cross-attention fusion at full resolution.
    pub f_cross: Tensor,
    /// Final condition `[N, C_g, H, W]`.
    pub cond: Tensor,
}

fn check_dims(h: usize, w: usize, multiple: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(multiple) || !w.is_multiple_of(multiple) {
        return Err(Error::Config(format!("input {h}x{w} must be a non-zero multiple of {multiple}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Self {
        ResBlock { conv1: Conv2d::new(rng, c, c, 3, 1, RELU_GAIN), conv2: Conv2d::new(rng, c, c, 3, 1, 0.5) }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        Ok(x.add(&r)?.relu()?)
    }
}

impl Module for ResBlock {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.scope("conv1", |v| self.conv1.visit_params(v));
        v.scope("conv2", |v| self.conv2.visit_params(v));
    }
}

/// Small residual convolutional image encoder; channels double per level.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stages: Vec<(Conv2d, ResBlock)>,
}

impl ImageEncoder {
    pub fn new(rng: &mut ChaCha8Rng, levels: usize, base: usize) -> Self {
        let mut stages = Vec::with_capacity(levels);
        for l in 0..levels {
            let (c_in, c_out, stride) = if l == 0 { (3, base, 1) } else { (base << (l - 1), base << l, 2) };
            stages.push((Conv2d::new(rng, c_in, c_out, 3, stride, RELU_GAIN), ResBlock::new(rng, c_out)));
        }
        ImageEncoder { stages }
    }

    /// `[N,3,H,W]` -> one feature map per level.
    pub fn forward(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
                "image encoder expects [N,3,H,W], got {s:?}"
            ))));
        }
        check_dims(s[2], s[3], 1 << (self.stages.len() - 1))?;
        let mut out = Vec::with_capacity(self.stages.len());
        let mut x = img.clone();
        for (down, res) in &self.stages {
            x = res.forward(&down.forward(&x)?.relu()?)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

impl Module for ImageEncoder {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        for (i, (down, res)) in self.stages.iter_mut().enumerate() {
            v.scope(&format!("stage{i}"), |v| {
                v.scope("down", |v| down.visit_params(v));
                v.scope("res", |v| res.visit_params(v));
            });
        }
    }
}

/// Feature pyramid over the sparse depth: bottom-up strided convs, then
/// top-down nearest upsampling merged with 1x1 lateral projections.
#[derive(Debug, Clone)]
pub struct DepthPyramid {
    pub bottom_up: Vec<Conv2d>,
    pub lateral: Vec<Conv2d>,
    pub smooth: Conv2d,
    /// Meters are divided by this before entering the network.
    pub depth_scale: f64,
    pub fill_channel: bool,
}

impl DepthPyramid {
    pub fn new(rng: &mut ChaCha8Rng, levels: usize, channels: usize, depth_scale: f64, fill_channel: bool) -> Self {
        let c_in = Self::input_channels(fill_channel);
        let bottom_up = (0..levels)
            .map(|l| {
                if l == 0 {
                    Conv2d::new(rng, c_in, channels, 3, 1, RELU_GAIN)
                } else {
                    Conv2d::new(rng, channels, channels, 3, 2, RELU_GAIN)
                }
            })
            .collect();
        let lateral = (0..levels).map(|_| Conv2d::new(rng, channels, channels, 1, 1, 1.0)).collect();
        DepthPyramid {
            bottom_up,
            lateral,
            smooth: Conv2d::new(rng, channels, channels, 3, 1, 1.0),
            depth_scale,
            fill_channel,
        }
    }

    pub fn input_channels(fill_channel: bool) -> usize {
        if fill_channel {
            3
        } else {
            2
        }
    }

    /// `[N,C,H,W]` network input: scaled depth (0 where invalid), the mask
    /// and, when enabled, the scaled nearest-pixel fill (0 if nothing to fill from).
    pub fn input_tensor(&self, sparse: &[&crate::depth::DepthMap]) -> Result<Tensor> {
        let (h, w) = sparse[0].dims();
        let c = Self::input_channels(self.fill_channel);
        let mut data = Vec::with_capacity(sparse.len() * c * h * w);
        for m in sparse {
            if m.dims() != (h, w) {
                return Err(Error::Data(format!("sparse batch mixes {:?} and {:?}", (h, w), m.dims())));
            }
            data.extend(m.meters().iter().map(|d| d / self.depth_scale));
            data.extend(m.mask_f64());
            if self.fill_channel {
                match crate::depth::densify_nearest(m) {
                    Some(f) => data.extend(f.meters().iter().map(|d| d / self.depth_scale)),
                    None => data.extend(std::iter::repeat_n(0.0, h * w)),
                }
            }
        }
        Ok(Tensor::from_vec(&[sparse.len(), c, h, w], data)?)
    }

    /// Returns the merged pyramid, finest level first; element 0 (after the
    /// smoothing conv) is the full-resolution depth feature map.
    pub fn forward(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let s = input.shape();
        let c = Self::input_channels(self.fill_channel);
        if s.len() != 4 || s[1] != c {
            return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
                "depth pyramid expects [N,{c},H,W], got {s:?}"
            ))));
        }
        check_dims(s[2], s[3], 1 << (self.bottom_up.len() - 1))?;
        let mut feats = Vec::with_capacity(self.bottom_up.len());
        let mut x = input.clone();
        for conv in &self.bottom_up {
            x = conv.forward(&x)?.relu()?;
            feats.push(x.clone());
        }
        let levels = feats.len();
        let mut merged = vec![Tensor::scalar(0.0); levels];
        let mut top = self.lateral[levels - 1].forward(&feats[levels - 1])?;
        merged[levels - 1] = top.clone();
        for l in (0..levels - 1).rev() {
            top = self.lateral[l].forward(&feats[l])?.add(&top.upsample_nearest2x()?)?;
            merged[l] = top.clone();
        }
        merged[0] = self.smooth.forward(&merged[0])?;
        Ok(merged)
    }
}

impl Module for DepthPyramid {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        for (i, c) in self.bottom_up.iter_mut().enumerate() {
            v.scope(&format!("bottom_up{i}"), |v| c.visit_params(v));
        }
        for (i, c) in self.lateral.iter_mut().enumerate() {
            v.scope(&format!("lateral{i}"), |v| c.visit_params(v));
        }
        v.scope("smooth", |v| self.smooth.visit_params(v));
    }
}

/// Multi-scale deformable attention.
///
/// Each query at reference point `p` attends, per head, to `n_points`
/// locations on every value level: `p_l + offset`, where `p_l` is `p` mapped
/// onto level `l`'s grid and offsets are in that level's cell units. The
/// per-head weights are a softmax over all (level, point) pairs.
#[derive(Debug, Clone)]
pub struct DeformAttn {
    pub n_heads: usize,
    pub n_levels: usize,
    pub n_points: usize,
    pub value_proj: Conv2d,
    pub offset_proj: Conv2d,
    pub weight_proj: Conv2d,
    pub out_proj: Conv2d,
}

/// Forward result with the intermediate sampling maps.
#[derive(Debug, Clone)]
pub struct AttnOutput {
    pub out: Tensor,
    /// `[N, heads*levels*points*2, Hq, Wq]`, channel `((h L + l) P + p) 2 + {0: x, 1: y}`.
    pub offsets: Tensor,
    /// `[N, heads*levels*points, Hq, Wq]`, softmax-normalized per head.
    pub weights: Tensor,
}

impl DeformAttn {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize, n_levels: usize, n_points: usize) -> Self {
        let slots = n_heads * n_levels * n_points;
        DeformAttn {
            n_heads,
            n_levels,
            n_points,
            value_proj: Conv2d::new(rng, d_model, d_model, 1, 1, 1.0),
            offset_proj: Conv2d::zeros(d_model, 2 * slots, 1),
            weight_proj: Conv2d::zeros(d_model, slots, 1),
            out_proj: Conv2d::new(rng, d_model, d_model, 1, 1, 1.0),
        }
    }

    pub fn d_model(&self) -> usize {
        self.value_proj.out_channels()
    }

    /// Reference coordinates of every query of a `hq x wq` grid on a
    /// `hl x wl` level, repeated `points` times: `[hq*wq*points, 2]`.
    pub fn reference_coords(hq: usize, wq: usize, hl: usize, wl: usize, points: usize) -> Vec<f64> {
        let (sx, sy) = (wl as f64 / wq as f64, hl as f64 / hq as f64);
        let mut out = Vec::with_capacity(hq * wq * points * 2);
        for y in 0..hq {
            for x in 0..wq {
                let rx = (x as f64 + 0.5) * sx - 0.5;
                let ry = (y as f64 + 0.5) * sy - 0.5;
                for _ in 0..points {
                    out.push(rx);
                    out.push(ry);
                }
            }
        }
        out
    }

    pub fn forward(&self, query: &Tensor, values: &[Tensor]) -> Result<AttnOutput> {
        if values.is_empty() {
            return Err(Error::Usage("deformable attention needs at least one value level".into()));
        }
        if values.len() != self.n_levels {
            return Err(Error::Usage(format!("expected {} value levels, got {}", self.n_levels, values.len())));
        }
        let qs = query.shape();
        let d = self.d_model();
        if qs.len() != 4 || qs[1] != d {
            return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
                "query {qs:?} does not have {d} channels"
            ))));
        }
        let (n, hq, wq) = (qs[0], qs[2], qs[3]);
        let q = hq * wq;
        let (heads, levels, points) = (self.n_heads, self.n_levels, self.n_points);
        let dh = d / heads;

        let offsets = self.offset_proj.forward(query)?;
        let logits = self.weight_proj.forward(query)?;
        let weights = logits
            .reshape(&[n, heads, levels * points, hq, wq])?
            .softmax(2)?
            .reshape(&[n, heads * levels * points, hq, wq])?;
        let projected: Vec<Tensor> = values.iter().map(|v| self.value_proj.forward(v)).collect::<Result<_>>()?;
        let refs: Vec<Tensor> = projected
            .iter()
            .map(|v| {
                let (hl, wl) = (v.shape()[2], v.shape()[3]);
                Tensor::from_vec(&[q * points, 2], Self::reference_coords(hq, wq, hl, wl, points))
            })
            .collect::<std::result::Result<_, _>>()?;

        let mut batch_out = Vec::with_capacity(n);
        for b in 0..n {
            let off_b = offsets.narrow(0, b, 1)?;
            let w_b = weights.narrow(0, b, 1)?;
            let mut head_out = Vec::with_capacity(heads);
            for h in 0..heads {
                let mut acc: Option<Tensor> = None;
                for (l, v) in projected.iter().enumerate() {
                    if v.shape()[0] != n || v.shape()[1] != d {
                        return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
                            "value level {l} has shape {:?}",
                            v.shape()
                        ))));
                    }
                    let slot = h * levels + l;
                    let coords = off_b
                        .narrow(1, slot * points * 2, points * 2)?
                        .reshape(&[points, 2, q])?
                        .permute(&[2, 0, 1])?
                        .reshape(&[q * points, 2])?
                        .add(&refs[l])?;
                    let (hl, wl) = (v.shape()[2], v.shape()[3]);
                    let feat = v.narrow(0, b, 1)?.narrow(1, h * dh, dh)?.reshape(&[dh, hl, wl])?;
                    let sampled = feat.bilinear_sample(&coords)?;
                    let a = w_b
                        .narrow(1, slot * points, points)?
                        .reshape(&[points, q])?
                        .permute(&[1, 0])?
                        .reshape(&[q * points, 1])?
                        .expand(&[q * points, dh])?;
                    let contrib = sampled.mul(&a)?.reshape(&[q, points, dh])?.sum_axis(1)?;
                    acc = Some(match acc {
                        Some(prev) => prev.add(&contrib)?,
                        None => contrib,
                    });
                }
                let acc = acc.expect("at least one level");
                head_out.push(acc.permute(&[1, 0])?.reshape(&[1, dh, hq, wq])?);
            }
            let refs_h: Vec<&Tensor> = head_out.iter().collect();
            batch_out.push(Tensor::concat(&refs_h, 1)?);
        }
        let refs_b: Vec<&Tensor> = batch_out.iter().collect();
        let out = self.out_proj.forward(&Tensor::concat(&refs_b, 0)?)?;
        Ok(AttnOutput { out, offsets, weights })
    }
}

impl Module for DeformAttn {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.scope("value_proj", |v| self.value_proj.visit_params(v));
        v.scope("offset_proj", |v| self.offset_proj.visit_params(v));
        v.scope("weight_proj", |v| self.weight_proj.visit_params(v));
        v.scope("out_proj", |v| self.out_proj.visit_params(v));
    }
}

/// Full guidance extractor.
#[derive(Debug, Clone)]
pub struct GuidanceExtractor {
    pub config: GuidanceConfig,
    pub image_encoder: ImageEncoder,
    pub depth_pyramid: DepthPyramid,
    /// Per-level 1x1 projection of image features to `d_model`.
    pub input_proj: Vec<Conv2d>,
    pub self_attn: DeformAttn,
    /// Per-level 1x1 mix of `[projected, attended]` (2 d_model -> d_model).
    pub self_fuse: Vec<Conv2d>,
    pub depth_proj: Conv2d,
    pub cross_attn: DeformAttn,
    pub cross_fuse: Conv2d,
    pub fuse: Conv2d,
    pub fuse_residual: Conv2d,
}

impl GuidanceExtractor {
    pub fn new(rng: &mut ChaCha8Rng, config: &GuidanceConfig, depth_scale: f64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        Ok(GuidanceExtractor {
            config: c.clone(),
            image_encoder: ImageEncoder::new(rng, c.levels, c.image_channels),
            depth_pyramid: DepthPyramid::new(rng, c.levels, c.depth_channels, depth_scale, c.fill_channel),
            input_proj: (0..c.levels).map(|l| Conv2d::new(rng, c.image_channels << l, d, 1, 1, 1.0)).collect(),
            self_attn: DeformAttn::new(rng, d, c.n_heads, c.levels, c.n_points),
            self_fuse: (0..c.levels).map(|_| Conv2d::new(rng, 2 * d, d, 1, 1, 1.0)).collect(),
            depth_proj: Conv2d::new(rng, c.depth_channels, d, 1, 1, 1.0),
            cross_attn: DeformAttn::new(rng, d, c.n_heads, c.levels, c.n_points),
            cross_fuse: Conv2d::new(rng, 2 * d, d, 1, 1, 1.0),
            fuse: Conv2d::new(rng, 2 * d, c.cond_channels, 3, 1, RELU_GAIN),
            fuse_residual: Conv2d::new(rng, c.cond_channels, c.cond_channels, 1, 1, 0.5),
        })
    }

    /// Enhances each image level with deformable self-attention over all
    /// levels and aggregates them top-down to full resolution.
    /// Returns `(per-level enhanced features, F_self)`.
    pub fn self_attention_enhance(&self, image_scales: &[Tensor]) -> Result<(Vec<Tensor>, Tensor)> {
        let projected: Vec<Tensor> =
            image_scales.iter().zip(&self.input_proj).map(|(x, p)| p.forward(x)).collect::<Result<_>>()?;
        let mut enhanced = Vec::with_capacity(projected.len());
        for (l, q) in projected.iter().enumerate() {
            let att = self.self_attn.forward(q, &projected)?.out;
            enhanced.push(self.self_fuse[l].forward(&Tensor::concat(&[q, &att], 1)?)?);
        }
        let mut top = enhanced.last().expect("levels >= 1").clone();
        for e in enhanced.iter().rev().skip(1) {
            top = e.add(&top.upsample_nearest2x()?)?;
        }
        Ok((enhanced, top))
    }

    /// Depth features query the enhanced image levels.
    pub fn cross_attention_fuse(&self, depth_feat: &Tensor, enhanced: &[Tensor]) -> Result<Tensor> {
        let q = self.depth_proj.forward(depth_feat)?;
        let att = self.cross_attn.forward(&q, enhanced)?.out;
        self.cross_fuse.forward(&Tensor::concat(&[&q, &att], 1)?)
    }

    /// `cond = h + W relu(h)`, `h = conv3x3([f_self, f_cross])`.
    pub fn fuse_guidance(&self, f_self: &Tensor, f_cross: &Tensor) -> Result<Tensor> {
        if f_self.shape()[0] != f_cross.shape()[0] || f_self.shape()[2..] != f_cross.shape()[2..] {
            return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
                "fuse_guidance: {:?} vs {:?}",
                f_self.shape(),
                f_cross.shape()
            ))));
        }
        let h = self.fuse.forward(&Tensor::concat(&[f_self, f_cross], 1)?)?;
        Ok(h.add(&self.fuse_residual.forward(&h.relu()?)?)?)
    }

    /// `image[N,3,H,W]`, `depth_input[N,2|3,H,W]` (see [`DepthPyramid::input_tensor`]).
    pub fn forward(&self, image: &Tensor, depth_input: &Tensor) -> Result<GuidanceFeatures> {
        let (is, ds) = (image.shape(), depth_input.shape());
        if is.len() != 4 || ds.len() != 4 || is[0] != ds[0] || is[2..] != ds[2..] {
            return Err(Error::Tensor(depthdiff_tensor::TensorError::Dimension(format!(
                "image {is:?} and depth input {ds:?} disagree"
            ))));
        }
        let image_scales = self.image_encoder.forward(image)?;
        let depth_scales = self.depth_pyramid.forward(depth_input)?;
        let (enhanced, f_self) = self.self_attention_enhance(&image_scales)?;
        let f_cross = self.cross_attention_fuse(&depth_scales[0], &enhanced)?;
        let cond = self.fuse_guidance(&f_self, &f_cross)?;
        Ok(GuidanceFeatures { image_scales, depth_scales, f_self, f_cross, cond })
    }
}

impl Module for GuidanceExtractor {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.scope("image_encoder", |v| self.image_encoder.visit_params(v));
        v.scope("depth_pyramid", |v| self.depth_pyramid.visit_params(v));
        for (i, c) in self.input_proj.iter_mut().enumerate() {
            v.scope(&format!("input_proj{i}"), |v| c.visit_params(v));
        }
        v.scope("self_attn", |v| self.self_attn.visit_params(v));
        for (i, c) in self.self_fuse.iter_mut().enumerate() {
            v.scope(&format!("self_fuse{i}"), |v| c.visit_params(v));
        }
        v.scope("depth_proj", |v| self.depth_proj.visit_params(v));
        v.scope("cross_attn", |v| self.cross_attn.visit_params(v));
        v.scope("cross_fuse", |v| self.cross_fuse.visit_params(v));
        v.scope("fuse", |v| self.fuse.visit_params(v));
        v.scope("fuse_residual", |v| self.fuse_residual.visit_params(v));
    }
}
