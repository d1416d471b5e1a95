//! Parameterized layers and named-parameter traversal.

use depthdiff_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Walks named parameters, building dotted names from nested scopes.
pub struct ParamVisitor<'a> {
    prefix: String,
    f: &'a mut dyn FnMut(&str, &mut Tensor),
}

impl<'a> ParamVisitor<'a> {
    pub fn new(f: &'a mut dyn FnMut(&str, &mut Tensor)) -> Self {
        ParamVisitor { prefix: String::new(), f }
    }

    pub fn param(&mut self, name: &str, t: &mut Tensor) {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        (self.f)(&full, t);
    }

    pub fn scope(&mut self, name: &str, g: impl FnOnce(&mut ParamVisitor<'_>)) {
        let saved = self.prefix.clone();
        if !self.prefix.is_empty() {
            self.prefix.push('.');
        }
        self.prefix.push_str(name);
        g(self);
        self.prefix = saved;
    }
}

pub trait Module {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>);

    /// Number of scalar parameters.
    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut ParamVisitor::new(&mut |_, t| n += t.numel()));
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params(&mut ParamVisitor::new(&mut |_, t| t.zero_grad()));
    }
}

/// Uniform init with variance `gain^2 / fan_in`.
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::param(shape, data).expect("finite init")
}

pub(crate) fn param_full(shape: &[usize], value: f64) -> Tensor {
    Tensor::full(shape, value).with_requires_grad(true)
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize, gain: f64) -> Self {
        Conv2d {
            weight: init_uniform(rng, &[c_out, c_in, k, k], c_in * k * k, gain),
            bias: param_full(&[c_out], 0.0),
            stride,
            padding: k / 2,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Conv2d {
            weight: param_full(&[c_out, c_in, k, k], 0.0),
            bias: param_full(&[c_out], 0.0),
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.param("weight", &mut self.weight);
        v.param("bias", &mut self.bias);
    }
}

/// 2x2 stride-2 transpose convolution (resolution doubling).
#[derive(Debug, Clone)]
pub struct Upsample2x {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Upsample2x {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> Self {
        Upsample2x {
            weight: init_uniform(rng, &[c_in, c_out, 2, 2], c_in, 1.0),
            bias: param_full(&[c_out], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv_transpose2d(&self.weight, Some(&self.bias), 2)?)
    }
}

impl Module for Upsample2x {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.param("weight", &mut self.weight);
        v.param("bias", &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        GroupNorm { groups, gamma: param_full(&[channels], 1.0), beta: param_full(&[channels], 0.0), eps: 1e-5 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.group_norm(self.groups, self.eps)?.channel_affine(&self.gamma, &self.beta)?)
    }
}

impl Module for GroupNorm {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.param("gamma", &mut self.gamma);
        v.param("beta", &mut self.beta);
    }
}

/// `x[N,in] W[in,out] + b[out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, gain: f64) -> Self {
        Linear { weight: init_uniform(rng, &[d_in, d_out], d_in, gain), bias: param_full(&[d_out], 0.0) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let d_out = self.bias.numel();
        let b = self.bias.reshape(&[1, d_out])?.expand(&[n, d_out])?;
        Ok(x.matmul(&self.weight)?.add(&b)?)
    }
}

impl Module for Linear {
    fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
        v.param("weight", &mut self.weight);
        v.param("bias", &mut self.bias);
    }
}

/// Adds a per-sample channel vector `[N,C]` to every pixel of `[N,C,H,W]`.
pub fn add_channel_vector(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let b = v.reshape(&[s[0], s[1], 1, 1])?.expand(s)?;
    Ok(x.add(&b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    struct Pair {
        a: Conv2d,
        b: Linear,
    }

    impl Module for Pair {
        fn visit_params(&mut self, v: &mut ParamVisitor<'_>) {
            v.scope("a", |v| self.a.visit_params(v));
            v.scope("b", |v| self.b.visit_params(v));
        }
    }

    #[test]
    fn visitor_builds_dotted_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Pair { a: Conv2d::new(&mut rng, 2, 3, 3, 1, 1.0), b: Linear::new(&mut rng, 4, 5, 1.0) };
        let mut names = Vec::new();
        m.visit_params(&mut ParamVisitor::new(&mut |n, _| names.push(n.to_string())));
        assert_eq!(names, ["a.weight", "a.bias", "b.weight", "b.bias"]);
        assert_eq!(m.num_params(), 3 * 2 * 9 + 3 + 20 + 5);
    }
}
