use crate::error::{dim_err, Result, TensorError};
use crate::tensor::Tensor;

impl Tensor {
    /// Group normalization of `[N,C,H,W]` without affine. Statistics are taken
    /// per sample and per channel group, never across the batch axis.
    pub fn group_norm(&self, groups: usize, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(dim_err!("group_norm expects [N,C,H,W], got {:?}", s));
        }
        if groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(TensorError::Config(format!("{} channels not divisible into {groups} groups", s[1])));
        }
        if eps <= 0.0 {
            return Err(TensorError::Config(format!("group_norm eps must be > 0, got {eps}")));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let m = c / groups * plane;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * groups];
        for (gi, chunk) in x.chunks(m).enumerate() {
            let mean = chunk.iter().sum::<f64>() / m as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std[gi] = r;
            for (o, v) in y[gi * m..(gi + 1) * m].iter_mut().zip(chunk) {
                *o = (v - mean) * r;
            }
        }
        let xhat = y.clone();
        Tensor::from_op("group_norm", s.to_vec(), y, &[self], move |g| {
            let mut gx = vec![0.0; g.len()];
            for gi in 0..inv_std.len() {
                let range = gi * m..(gi + 1) * m;
                let (gs, xs) = (&g[range.clone()], &xhat[range.clone()]);
                let mg = gs.iter().sum::<f64>() / m as f64;
                let mgx = gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                for ((o, gv), xv) in gx[range].iter_mut().zip(gs).zip(xs) {
                    *o = inv_std[gi] * (gv - mg - xv * mgx);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Per-channel `x * scale[c] + shift[c]` on `[N,C,...]`.
    pub fn channel_affine(&self, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || scale.shape() != [s[1]] || shift.shape() != [s[1]] {
            return Err(dim_err!(
                "channel_affine: input {:?}, scale {:?}, shift {:?}",
                s,
                scale.shape(),
                shift.shape()
            ));
        }
        let (n, c) = (s[0], s[1]);
        let plane: usize = s[2..].iter().product();
        let x = self.data();
        let (a, b) = (scale.data(), shift.data());
        let mut y = vec![0.0; x.len()];
        for i in 0..n * c {
            let ch = i % c;
            for (o, v) in y[i * plane..(i + 1) * plane].iter_mut().zip(&x[i * plane..(i + 1) * plane]) {
                *o = v * a[ch] + b[ch];
            }
        }
        let (xs, sc) = (self.clone(), scale.clone());
        Tensor::from_op("channel_affine", s.to_vec(), y, &[self, scale, shift], move |g| {
            let (x, a) = (xs.data(), sc.data());
            let mut gx = vec![0.0; g.len()];
            let mut ga = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for i in 0..n * c {
                let ch = i % c;
                for p in i * plane..(i + 1) * plane {
                    gx[p] = g[p] * a[ch];
                    ga[ch] += g[p] * x[p];
                    gb[ch] += g[p];
                }
            }
            vec![Some(gx), Some(ga), Some(gb)]
        })
    }
}
