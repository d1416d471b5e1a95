//! Training objectives on depth maps.

use depthdiff_tensor::{Tensor, TensorError};

use crate::depth::DepthMap;
use crate::error::{Error, Result};

/// `(Σ|e| + Σe²) / N_valid` over ground-truth-valid pixels, `e` in meters.
/// `pred` is `[N,1,H,W]` with one ground-truth map per batch element.
pub fn map_loss(pred: &Tensor, gt: &[&DepthMap]) -> Result<Tensor> {
    let s = pred.shape();
    if s.len() != 4 || s[1] != 1 || s[0] != gt.len() {
        return Err(Error::Tensor(TensorError::Dimension(format!(
            "map_loss: prediction {s:?} with {} ground-truth maps",
            gt.len()
        ))));
    }
    let (h, w) = (s[2], s[3]);
    let mut target = Vec::with_capacity(pred.numel());
    let mut mask = Vec::with_capacity(pred.numel());
    for g in gt {
        if g.dims() != (h, w) {
            return Err(Error::Tensor(TensorError::Dimension(format!(
                "map_loss: ground truth {:?} vs prediction {h}x{w}",
                g.dims()
            ))));
        }
        target.extend_from_slice(g.meters());
        mask.extend(g.mask_f64());
    }
    let n_valid = mask.iter().filter(|m| **m > 0.0).count();
    if n_valid == 0 {
        return Err(Error::Data("map_loss: ground truth has no valid pixel".into()));
    }
    let e = pred.sub(&Tensor::from_vec(s, target)?)?.mul(&Tensor::from_vec(s, mask)?)?;
    let total = e.abs()?.sum()?.add(&e.square()?.sum()?)?;
    Ok(total.mul_scalar(1.0 / n_valid as f64)?)
}

/// `γ₁ L_diff + γ₂ L_map`.
pub fn total_loss(l_diff: &Tensor, l_map: &Tensor, gamma1: f64, gamma2: f64) -> Result<Tensor> {
    Ok(l_diff.mul_scalar(gamma1)?.add(&l_map.mul_scalar(gamma2)?)?)
}
