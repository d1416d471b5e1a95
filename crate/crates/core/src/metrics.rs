//! Depth-completion error metrics over ground-truth-valid pixels.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
    pub n_valid: usize,
}

pub fn metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricsReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::Data(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let w = gt.width();
    let (mut se, mut ae, mut ise, mut iae, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (i, (&g, &p)) in gt.meters().iter().zip(pred.meters()).enumerate() {
        if !gt.valid()[i] {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::Numeric(format!("non-positive prediction {p} at pixel ({}, {})", i / w, i % w)));
        }
        let e = p - g;
        let ie = 1.0 / p - 1.0 / g;
        se += e * e;
        ae += e.abs();
        ise += ie * ie;
        iae += ie.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("ground truth has no valid pixel".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        rmse_mm: (se / nf).sqrt() * 1000.0,
        mae_mm: ae / nf * 1000.0,
        irmse_per_km: (ise / nf).sqrt() * 1000.0,
        imae_per_km: iae / nf * 1000.0,
        n_valid: n,
    })
}

impl MetricsReport {
    /// Per-metric mean over samples; `n_valid` is summed.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Some(MetricsReport {
            rmse_mm: avg(|r| r.rmse_mm),
            mae_mm: avg(|r| r.mae_mm),
            irmse_per_km: avg(|r| r.irmse_per_km),
            imae_per_km: avg(|r| r.imae_per_km),
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
    pub n_valid: usize,
    pub id: String,
}

impl MetricsRow {
    pub fn new(id: &str, m: &MetricsReport) -> Self {
        MetricsRow {
            rmse_mm: m.rmse_mm,
            mae_mm: m.mae_mm,
            irmse_per_km: m.irmse_per_km,
            imae_per_km: m.imae_per_km,
            n_valid: m.n_valid,
            id: id.to_string(),
        }
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            rmse_mm: self.rmse_mm,
            mae_mm: self.mae_mm,
            irmse_per_km: self.irmse_per_km,
            imae_per_km: self.imae_per_km,
            n_valid: self.n_valid,
        }
    }
}

/// CSV with header `rmse_mm,mae_mm,irmse_per_km,imae_per_km,n_valid,id`.
/// Floats use the shortest representation that parses back exactly.
pub fn write_csv(out: impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("csv: {e}"))))
        .collect()
}
