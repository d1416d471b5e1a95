use crate::error::{dim_err, Result, TensorError};
use crate::tensor::Tensor;

/// Clamped cell lookup for one axis: (lower index, upper index, fraction, d(clamped)/d(coord)).
fn axis_cell(v: f64, len: usize) -> (usize, usize, f64, f64) {
    let hi = (len - 1) as f64;
    let (c, dc) = if v < 0.0 {
        (0.0, 0.0)
    } else if v > hi {
        (hi, 0.0)
    } else {
        (v, 1.0)
    };
    if len == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let i0 = (c.floor() as usize).min(len - 2);
    (i0, i0 + 1, c - i0 as f64, dc)
}

impl Tensor {
    /// Bilinear lookup of `feature[C,H,W]` at continuous `(x, y)` points given
    /// as `coords[P,2]`, returning `[P,C]`. Points outside the grid are clamped
    /// to the border (zero gradient w.r.t. the coordinate there).
    pub fn bilinear_sample(&self, coords: &Tensor) -> Result<Tensor> {
        let fs = self.shape();
        if fs.len() != 3 || coords.ndim() != 2 || coords.shape()[1] != 2 {
            return Err(dim_err!("bilinear_sample: feature {:?}, coords {:?}", fs, coords.shape()));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        if h == 0 || w == 0 {
            return Err(dim_err!("bilinear_sample on empty grid {:?}", fs));
        }
        let p = coords.shape()[0];
        let xy = coords.data();
        if xy.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Numeric("bilinear_sample: non-finite coordinate".into()));
        }
        let f = self.data();
        let plane = h * w;
        let mut y = vec![0.0; p * c];
        for i in 0..p {
            let (x0, x1, fx, _) = axis_cell(xy[2 * i], w);
            let (y0, y1, fy, _) = axis_cell(xy[2 * i + 1], h);
            let (w00, w01, w10, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
            let (i00, i01, i10, i11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
            for ch in 0..c {
                let base = ch * plane;
                y[i * c + ch] = w00 * f[base + i00] + w01 * f[base + i01] + w10 * f[base + i10] + w11 * f[base + i11];
            }
        }
        let (feat, pts) = (self.clone(), coords.clone());
        Tensor::from_op("bilinear_sample", vec![p, c], y, &[self, coords], move |g| {
            let f = feat.data();
            let xy = pts.data();
            let mut gf = feat.requires_grad().then(|| vec![0.0; f.len()]);
            let mut gc = pts.requires_grad().then(|| vec![0.0; xy.len()]);
            for i in 0..p {
                let (x0, x1, fx, dcx) = axis_cell(xy[2 * i], w);
                let (y0, y1, fy, dcy) = axis_cell(xy[2 * i + 1], h);
                let (i00, i01, i10, i11) = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1);
                let gi = &g[i * c..(i + 1) * c];
                if let Some(gf) = gf.as_mut() {
                    let (w00, w01, w10, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
                    for (ch, gv) in gi.iter().enumerate() {
                        let base = ch * plane;
                        gf[base + i00] += w00 * gv;
                        gf[base + i01] += w01 * gv;
                        gf[base + i10] += w10 * gv;
                        gf[base + i11] += w11 * gv;
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for (ch, gv) in gi.iter().enumerate() {
                        let base = ch * plane;
                        let (a, b, cc, d) = (f[base + i00], f[base + i01], f[base + i10], f[base + i11]);
                        sx += gv * ((1.0 - fy) * (b - a) + fy * (d - cc));
                        sy += gv * ((1.0 - fx) * (cc - a) + fx * (d - b));
                    }
                    gc[2 * i] += sx * dcx;
                    gc[2 * i + 1] += sy * dcy;
                }
            }
            vec![gf, gc]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::from_vec(&[2, 4, 5], (0..40).map(|i| (i as f64 * 0.61).sin()).collect()).unwrap()
    }

    #[test]
    fn integer_coordinate_reads_grid_value() {
        let f = ramp();
        let y = f.bilinear_sample(&Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[f.data()[3 * 5 + 2], f.data()[20 + 3 * 5 + 2]]);
    }

    #[test]
    fn midpoint_averages_neighbours() {
        let mut d = vec![0.0; 9];
        d[1] = 4.0;
        d[2] = 8.0;
        let f = Tensor::from_vec(&[1, 3, 3], d).unwrap();
        let y = f.bilinear_sample(&Tensor::from_vec(&[1, 2], vec![1.5, 0.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn out_of_range_clamps_to_border() {
        let f = ramp();
        let far = f.bilinear_sample(&Tensor::from_vec(&[1, 2], vec![100.0, -7.0]).unwrap()).unwrap();
        let edge = f.bilinear_sample(&Tensor::from_vec(&[1, 2], vec![4.0, 0.0]).unwrap()).unwrap();
        assert_eq!(far.data(), edge.data());
    }

    #[test]
    fn empty_coords_give_empty_output() {
        let y = ramp().bilinear_sample(&Tensor::zeros(&[0, 2])).unwrap();
        assert_eq!(y.shape(), &[0, 2]);
    }
}
