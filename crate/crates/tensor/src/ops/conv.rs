//! 2-D convolution and its adjoint (transpose convolution), via im2col + GEMM.
//!
//! The im2col buffer is rebuilt during backward instead of being kept alive,
//! which trades a cheap gather for a large cut in peak memory.

use crate::error::{dim_err, Result, TensorError};
use crate::gemm::{gemm, gemm_into};
use crate::tensor::Tensor;

/// Geometry of a convolution from `c_in` channels at `h x w` to `c_out`
/// channels at `oh x ow`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(c_in: usize, h: usize, w: usize, c_out: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::Config("convolution stride must be >= 1".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(dim_err!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {pad}"
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Geom { c_in, h, w, c_out, kh, kw, stride, pad, oh, ow })
    }

    fn ckk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn l(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.l()
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let l = self.l();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * l..][..l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let l = self.l();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * l..][..l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// y[n] = W x[n]
    fn forward(&self, x: &[f64], weight: &[f64], batch: usize) -> Vec<f64> {
        let mut y = vec![0.0; batch * self.out_len()];
        let mut cols = vec![0.0; self.ckk() * self.l()];
        for n in 0..batch {
            self.im2col(&x[n * self.in_len()..][..self.in_len()], &mut cols);
            gemm_into(
                weight,
                &cols,
                &mut y[n * self.out_len()..][..self.out_len()],
                self.c_out,
                self.ckk(),
                self.l(),
                false,
                false,
                0.0,
            );
        }
        y
    }

    /// dx[n] = W^T dy[n]
    fn backward_input(&self, dy: &[f64], weight: &[f64], batch: usize) -> Vec<f64> {
        let mut dx = vec![0.0; batch * self.in_len()];
        for n in 0..batch {
            let dcols = gemm(weight, &dy[n * self.out_len()..][..self.out_len()], self.ckk(), self.c_out, self.l(), true, false);
            self.col2im(&dcols, &mut dx[n * self.in_len()..][..self.in_len()]);
        }
        dx
    }

    /// dW = sum_n dy[n] cols(x[n])^T, accumulated in batch order.
    fn backward_weight(&self, dy: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
        let mut dw = vec![0.0; self.c_out * self.ckk()];
        let mut cols = vec![0.0; self.ckk() * self.l()];
        for n in 0..batch {
            self.im2col(&x[n * self.in_len()..][..self.in_len()], &mut cols);
            gemm_into(
                &dy[n * self.out_len()..][..self.out_len()],
                &cols,
                &mut dw,
                self.c_out,
                self.l(),
                self.ckk(),
                false,
                true,
                1.0,
            );
        }
        dw
    }
}

fn add_bias(y: &mut [f64], bias: &[f64], batch: usize, plane: usize) {
    let c = bias.len();
    for n in 0..batch {
        for (ch, b) in bias.iter().enumerate() {
            y[(n * c + ch) * plane..][..plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad(g: &[f64], channels: usize, batch: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for n in 0..batch {
        for (ch, acc) in gb.iter_mut().enumerate() {
            *acc += g[(n * channels + ch) * plane..][..plane].iter().sum::<f64>();
        }
    }
    gb
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(dim_err!("bias shape {:?}, expected [{channels}]", b.shape()));
        }
    }
    Ok(())
}

impl Tensor {
    /// `input[N,C,H,W] * kernel[F,C,kh,kw] (+ bias[F]) -> [N,F,H',W']`,
    /// `H' = (H + 2 padding - kh) / stride + 1`.
    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(dim_err!("conv2d: input {:?} and kernel {:?}", xs, ks));
        }
        check_bias(bias, ks[0])?;
        let batch = xs[0];
        let geom = Geom::new(xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], stride, padding)?;
        let mut y = geom.forward(self.data(), kernel.data(), batch);
        if let Some(b) = bias {
            add_bias(&mut y, b.data(), batch, geom.l());
        }
        let (x, k) = (self.clone(), kernel.clone());
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Tensor::from_op(
            "conv2d",
            vec![batch, geom.c_out, geom.oh, geom.ow],
            y,
            &parents,
            move |g| {
                let gx = x.requires_grad().then(|| geom.backward_input(g, k.data(), batch));
                let gk = k.requires_grad().then(|| geom.backward_weight(g, x.data(), batch));
                let mut out = vec![gx, gk];
                if has_bias {
                    out.push(Some(bias_grad(g, geom.c_out, batch, geom.l())));
                }
                out
            },
        )
    }

    /// Adjoint of [`Tensor::conv2d`] without padding:
    /// `input[N,C,H,W] * kernel[C,F,kh,kw] (+ bias[F]) -> [N,F,(H-1)s+kh,(W-1)s+kw]`.
    pub fn conv_transpose2d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
        let (xs, ks) = (self.shape(), kernel.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] {
            return Err(dim_err!("conv_transpose2d: input {:?} and kernel {:?}", xs, ks));
        }
        if stride == 0 {
            return Err(TensorError::Config("convolution stride must be >= 1".into()));
        }
        check_bias(bias, ks[1])?;
        let batch = xs[0];
        let (oh, ow) = ((xs[2] - 1) * stride + ks[2], (xs[3] - 1) * stride + ks[3]);
        // The forward conv this op is the adjoint of: F channels at oh x ow -> C channels at H x W.
        let geom = Geom::new(ks[1], oh, ow, ks[0], ks[2], ks[3], stride, 0)?;
        debug_assert_eq!((geom.oh, geom.ow), (xs[2], xs[3]));
        let mut y = geom.backward_input(self.data(), kernel.data(), batch);
        if let Some(b) = bias {
            add_bias(&mut y, b.data(), batch, oh * ow);
        }
        let (x, k) = (self.clone(), kernel.clone());
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        let f_out = ks[1];
        Tensor::from_op("conv_transpose2d", vec![batch, f_out, oh, ow], y, &parents, move |g| {
            let gx = x.requires_grad().then(|| geom.forward(g, k.data(), batch));
            let gk = k.requires_grad().then(|| geom.backward_weight(x.data(), g, batch));
            let mut out = vec![gx, gk];
            if has_bias {
                out.push(Some(bias_grad(g, f_out, batch, oh * ow)));
            }
            out
        })
    }
}
