//! Layout ops: reshape, permute, narrow, concat, explicit broadcast.

use crate::error::{dim_err, Result, TensorError};
use crate::tensor::{numel_of, Tensor};

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape(), shape));
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), &[self], |g| vec![Some(g.to_vec())])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("invalid permutation {:?} for rank {nd}", perm));
        }
        let in_shape = self.shape().to_vec();
        let in_strides = strides_of(&in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        // For each output flat index, the input flat index it reads.
        let n = self.numel();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        for _ in 0..n {
            src.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum::<usize>());
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let data = self.data();
        let y: Vec<f64> = src.iter().map(|&s| data[s]).collect();
        Tensor::from_op("permute", out_shape, y, &[self], move |g| {
            let mut gx = vec![0.0; g.len()];
            for (o, &s) in src.iter().enumerate() {
                gx[s] = g[o];
            }
            vec![Some(gx)]
        })
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(dim_err!(
                "narrow(axis {axis}, {start}..{}) out of range for {:?}",
                start + len,
                self.shape()
            ));
        }
        let (outer, alen, inner) = split_axis(self.shape(), axis);
        let data = self.data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            y.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op("narrow", shape, y, &[self], move |g| {
            let mut gx = vec![0.0; outer * alen * inner];
            for o in 0..outer {
                let base = o * alen * inner + start * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Usage("concat of zero tensors".into()))?;
        if axis >= first.ndim() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", first.shape()));
        }
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(dim_err!(
                    "concat on axis {axis}: {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                ));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                y.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op("concat", shape, y, parts, move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Explicit broadcast: every axis of size 1 may grow to the target size.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        let ok = shape.len() == self.ndim()
            && self.shape().iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(dim_err!("cannot expand {:?} to {:?}", self.shape(), shape));
        }
        let in_strides = strides_of(self.shape());
        let eff: Vec<usize> = self
            .shape()
            .iter()
            .zip(&in_strides)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let n = numel_of(shape);
        let nd = shape.len();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        for _ in 0..n {
            src.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum::<usize>());
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let data = self.data();
        let y: Vec<f64> = src.iter().map(|&s| data[s]).collect();
        let in_n = self.numel();
        Tensor::from_op("expand", shape.to_vec(), y, &[self], move |g| {
            let mut gx = vec![0.0; in_n];
            for (o, &s) in src.iter().enumerate() {
                gx[s] += g[o];
            }
            vec![Some(gx)]
        })
    }

    /// Nearest-neighbour 2x upsampling of the two trailing axes.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(dim_err!("upsample needs rank >= 2, got {:?}", self.shape()));
        }
        let (h, w) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let lead = &self.shape()[..nd - 2];
        let mut s6: Vec<usize> = lead.to_vec();
        s6.extend([h, 1, w, 1]);
        let mut e6: Vec<usize> = lead.to_vec();
        e6.extend([h, 2, w, 2]);
        let mut out: Vec<usize> = lead.to_vec();
        out.extend([2 * h, 2 * w]);
        self.reshape(&s6)?.expand(&e6)?.reshape(&out)
    }
}
