use crate::error::{dim_err, Result};
use crate::ops::shape::split_axis;
use crate::tensor::Tensor;

impl Tensor {
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![], vec![s], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        self.sum()?.mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(dim_err!("sum_axis({axis}) on {:?}", self.shape()));
        }
        let (outer, alen, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..alen {
                let src = &x[(o * alen + a) * inner..(o * alen + a + 1) * inner];
                for (d, s) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::from_op("sum_axis", shape, y, &[self], move |g| {
            let mut gx = vec![0.0; outer * alen * inner];
            for o in 0..outer {
                for a in 0..alen {
                    gx[(o * alen + a) * inner..(o * alen + a + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(dim_err!("softmax axis {axis} on {:?}", self.shape()));
        }
        let (outer, alen, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * alen + a) * inner + i;
                let m = (0..alen).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..alen {
                    let e = (x[at(a)] - m).exp();
                    y[at(a)] = e;
                    z += e;
                }
                for a in 0..alen {
                    y[at(a)] /= z;
                }
            }
        }
        let ys = y.clone();
        Tensor::from_op("softmax", self.shape().to_vec(), y, &[self], move |g| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * alen + a) * inner + i;
                    let dot: f64 = (0..alen).map(|a| g[at(a)] * ys[at(a)]).sum();
                    for a in 0..alen {
                        gx[at(a)] = ys[at(a)] * (g[at(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(dim_err!("matmul: {:?} x {:?}", a, b));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let y = crate::gemm::gemm(self.data(), other.data(), m, k, n, false, false);
        let (sa, sb) = (self.clone(), other.clone());
        Tensor::from_op("matmul", vec![m, n], y, &[self, other], move |g| {
            let ga = sa.requires_grad().then(|| crate::gemm::gemm(g, sb.data(), m, n, k, false, true));
            let gb = sb.requires_grad().then(|| crate::gemm::gemm(sa.data(), g, k, m, n, true, false));
            vec![ga, gb]
        })
    }
}
