//! Evaluation over a set of scenes.

use serde::{Deserialize, Serialize};

use crate::data::SceneSample;
use crate::depth::{densify_nearest, DepthMap};
use crate::error::{Error, Result};
use crate::metrics::{metrics, MetricsReport, MetricsRow};
use crate::model::DepthModel;
use crate::rng::{derive_seed, hash_str};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub refine: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { steps: 20, eta: 0.0, seed: 0, refine: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsReport,
}

/// Scores `predict` on every sample; the aggregate is the per-metric mean.
pub fn evaluate_with(
    samples: &[SceneSample],
    mut predict: impl FnMut(&SceneSample) -> Result<DepthMap>,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict(s).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("sample {}: {m}", s.id)),
            other => other,
        })?;
        if pred.dims() != s.dense_gt.dims() {
            return Err(Error::Data(format!(
                "sample {}: prediction {:?} vs ground truth {:?}",
                s.id,
                pred.dims(),
                s.dense_gt.dims()
            )));
        }
        let m = metrics(&pred, &s.dense_gt).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("sample {}: {m}", s.id)),
            Error::Data(m) => Error::Data(format!("sample {}: {m}", s.id)),
            other => other,
        })?;
        rows.push(MetricsRow::new(&s.id, &m));
    }
    let reports: Vec<MetricsReport> = rows.iter().map(MetricsRow::report).collect();
    let mean = MetricsReport::mean(&reports).ok_or_else(|| Error::Data("nothing to evaluate".into()))?;
    Ok(EvalReport { rows, mean })
}

/// Sampling seed of one scene, independent of evaluation order.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, &[hash_str(id)])
}

pub fn evaluate(model: &DepthModel, samples: &[SceneSample], opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(samples, |s| {
        if s.sparse.dims() != s.image.dims() {
            return Err(Error::Data(format!("sparse {:?} vs image {:?}", s.sparse.dims(), s.image.dims())));
        }
        model.complete(&s.image, &s.sparse, opts.steps, opts.eta, sample_seed(opts.seed, &s.id), opts.refine)
    })
}

/// Nearest-valid-pixel interpolation of the sparse input.
pub fn nearest_baseline(samples: &[SceneSample]) -> Result<EvalReport> {
    evaluate_with(samples, |s| densify_nearest(&s.sparse).ok_or_else(|| Error::Data("no valid sparse pixel".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_scene;
    use crate::data::{sparsify, SparsePattern};

    #[test]
    fn oracle_stub_scores_zero() {
        let samples: Vec<SceneSample> = (0..3).map(|i| synth_scene(i, 32, 32).unwrap()).collect();
        let r = evaluate_with(&samples, |s| Ok(s.dense_gt.clone())).unwrap();
        assert_eq!(r.mean.rmse_mm, 0.0);
        assert_eq!(r.mean.imae_per_km, 0.0);
        assert_eq!(r.rows.len(), 3);
    }

    #[test]
    fn mismatched_prediction_names_sample() {
        let samples = vec![synth_scene(4, 32, 32).unwrap()];
        let e = evaluate_with(&samples, |_| Ok(DepthMap::dense(2, 2, vec![1.0; 4]).unwrap())).unwrap_err();
        assert!(matches!(e, Error::Data(_)) && e.to_string().contains("scene_000004"), "{e}");
    }

    #[test]
    fn baseline_runs() {
        let mut s = synth_scene(5, 32, 32).unwrap();
        s.sparse = sparsify(&s.dense_gt, SparsePattern::Uniform { p: 0.2 }, 1).unwrap();
        let r = nearest_baseline(&[s]).unwrap();
        assert!(r.mean.rmse_mm >= r.mean.mae_mm && r.mean.mae_mm > 0.0);
    }
}
