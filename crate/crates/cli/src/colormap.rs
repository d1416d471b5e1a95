//! Fixed depth colormap for preview images.
//!
//! The lookup table is a 256-entry linear interpolation of nine viridis
//! control points, so its luminance rises monotonically from the near to the
//! far end of the range.

use depthdiff::{DepthMap, Error, Result};

const CONTROL: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

/// Colour of lookup entry `i` in `0..256`.
pub fn lut(i: u8) -> [u8; 3] {
    let x = i as f64 / 255.0 * (CONTROL.len() - 1) as f64;
    let k = (x.floor() as usize).min(CONTROL.len() - 2);
    let f = x - k as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (CONTROL[k][c] * (1.0 - f) + CONTROL[k + 1][c] * f).round() as u8;
    }
    out
}

/// Rec. 709 luma of an 8-bit colour.
pub fn luminance(rgb: [u8; 3]) -> f64 {
    0.2126 * rgb[0] as f64 + 0.7152 * rgb[1] as f64 + 0.0722 * rgb[2] as f64
}

/// Row-major RGB bytes; depths outside `range` saturate, invalid pixels are black.
pub fn render_depth_colormap(d: &DepthMap, range: (f64, f64)) -> Result<Vec<u8>> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::Usage(format!("colormap range ({lo}, {hi}) is degenerate")));
    }
    let mut out = Vec::with_capacity(d.meters().len() * 3);
    for (&m, &v) in d.meters().iter().zip(d.valid()) {
        if v {
            let t = ((m - lo) / (hi - lo)).clamp(0.0, 1.0);
            out.extend(lut((t * 255.0).round() as u8));
        } else {
            out.extend([0, 0, 0]);
        }
    }
    Ok(out)
}
