use depthdiff_tensor::Tensor;

use crate::error::{Error, Result};

/// Per-pixel depth in meters with a validity mask. Invalid pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    meters: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, meters: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if meters.len() != n || valid.len() != n {
            return Err(Error::Data(format!(
                "depth map {height}x{width} needs {n} values, got {} depths and {} flags",
                meters.len(),
                valid.len()
            )));
        }
        for (i, (&d, &v)) in meters.iter().zip(&valid).enumerate() {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::Data(format!("pixel {i}: depth {d} is not a finite non-negative value")));
            }
            if !v && d != 0.0 {
                return Err(Error::Data(format!("pixel {i}: invalid pixel carries depth {d}")));
            }
        }
        Ok(DepthMap { height, width, meters, valid })
    }

    /// Every pixel valid. Values must be positive.
    pub fn dense(height: usize, width: usize, meters: Vec<f64>) -> Result<Self> {
        if let Some(i) = meters.iter().position(|d| !(*d > 0.0)) {
            return Err(Error::Data(format!("dense depth must be positive, pixel {i} is {}", meters[i])));
        }
        let valid = vec![true; meters.len()];
        Self::new(height, width, meters, valid)
    }

    /// Valid wherever the depth is positive (0 is the missing-value sentinel).
    pub fn from_sparse_values(height: usize, width: usize, meters: Vec<f64>) -> Result<Self> {
        let valid = meters.iter().map(|d| *d > 0.0).collect();
        Self::new(height, width, meters, valid)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        DepthMap { height, width, meters: vec![0.0; height * width], valid: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn meters(&self) -> &[f64] {
        &self.meters
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.meters[y * self.width + x]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    /// `[1,1,H,W]` tensor of the meter values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.meters.clone()).expect("finite by construction")
    }

    /// Dense map from a `[H,W]`-sized buffer, clamping to at least `min_depth`.
    pub fn from_prediction(height: usize, width: usize, values: &[f64], min_depth: f64) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("prediction is non-finite at pixel {i}")));
        }
        Self::dense(height, width, values.iter().map(|v| v.max(min_depth)).collect())
    }
}

/// Affine map between meters and the unit-scale diffusion latent:
/// `z = 2 d / d_max - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthNormalizer {
    pub d_max: f64,
}

impl DepthNormalizer {
    pub fn new(d_max: f64) -> Result<Self> {
        if !(d_max > 0.0 && d_max.is_finite()) {
            return Err(Error::Config(format!("d_max must be positive, got {d_max}")));
        }
        Ok(DepthNormalizer { d_max })
    }

    pub fn normalize(&self, meters: f64) -> f64 {
        2.0 * meters / self.d_max - 1.0
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        (z + 1.0) * 0.5 * self.d_max
    }
}

/// Fills every pixel with the depth of the nearest valid pixel (Euclidean
/// distance, ties broken by row-major order). Returns `None` when the map has
/// no valid pixel.
pub fn densify_nearest(sparse: &DepthMap) -> Option<DepthMap> {
    let (h, w) = sparse.dims();
    let pts: Vec<(usize, usize)> =
        (0..h * w).filter(|&i| sparse.valid[i]).map(|i| (i / w, i % w)).collect();
    if pts.is_empty() {
        return None;
    }
    // Bucket valid pixels by row so the search can stop once rows are too far away.
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); h];
    for &(y, x) in &pts {
        rows[y].push(x);
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut best = (usize::MAX, 0usize);
            for r in 0..h {
                // Rows ordered by |dy|, lower row first on ties.
                let cands: [Option<usize>; 2] = if r == 0 { [Some(y), None] } else { [y.checked_sub(r), (y + r < h).then_some(y + r)] };
                if r * r > best.0 {
                    break;
                }
                for yy in cands.into_iter().flatten() {
                    for &xx in &rows[yy] {
                        let d2 = r * r + x.abs_diff(xx).pow(2);
                        let idx = yy * w + xx;
                        if d2 < best.0 || (d2 == best.0 && idx < best.1) {
                            best = (d2, idx);
                        }
                    }
                }
            }
            out[y * w + x] = sparse.meters[best.1];
        }
    }
    Some(DepthMap { height: h, width: w, meters: out, valid: vec![true; h * w] })
}
