//! Depth and image I/O, synthetic scenes, sparsification and manifests.

pub mod manifest;
pub mod png;
pub mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

pub use self::png::RgbImage;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub image: RgbImage,
    pub sparse: DepthMap,
    pub dense_gt: DepthMap,
}

impl SceneSample {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// Checks the shared-dimension and sparse-within-ground-truth contract.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if self.sparse.dims() != d || self.dense_gt.dims() != d {
            return Err(Error::Data(format!(
                "sample {}: image {:?}, sparse {:?}, gt {:?} disagree",
                self.id,
                d,
                self.sparse.dims(),
                self.dense_gt.dims()
            )));
        }
        Ok(())
    }
}

/// How measurements are kept when sparsifying a dense map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsePattern {
    /// Keep every valid pixel independently with probability `p`.
    Uniform { p: f64 },
    /// Keep the valid pixels of `n` evenly spaced rows.
    Scanlines { n: usize },
}

impl SparsePattern {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsePattern::Uniform { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Config(format!("keep probability {p} outside (0,1]")))
            }
            SparsePattern::Scanlines { n: 0 } => Err(Error::Config("scanline count must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Rows kept by `n` scanlines on an `h`-row image.
pub fn scanline_rows(h: usize, n: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).map(|i| ((2 * i + 1) * h) / (2 * n)).collect();
    rows.dedup();
    rows
}

pub fn sparsify(dense: &DepthMap, pattern: SparsePattern, seed: u64) -> Result<DepthMap> {
    pattern.validate()?;
    let (h, w) = dense.dims();
    let keep: Vec<bool> = match pattern {
        SparsePattern::Uniform { p } => {
            let mut rng = stream(seed, &[purpose::SPARSIFY]);
            dense.valid().iter().map(|&v| rng.random::<f64>() < p && v).collect()
        }
        SparsePattern::Scanlines { n } => {
            let mut row = vec![false; h];
            for r in scanline_rows(h, n) {
                row[r] = true;
            }
            (0..h * w).map(|i| row[i / w] && dense.valid()[i]).collect()
        }
    };
    let meters = dense.meters().iter().zip(&keep).map(|(&m, &k)| if k { m } else { 0.0 }).collect();
    DepthMap::new(h, w, meters, keep)
}
