//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
    pub tolerance: f64,
}

impl GradReport {
    fn new(op_name: &str, max_rel_error: f64, max_abs_error: f64, tolerance: f64) -> Self {
        GradReport {
            op_name: op_name.to_string(),
            max_rel_error,
            max_abs_error,
            passed: max_rel_error <= tolerance,
            tolerance,
        }
    }

    fn failed(op_name: &str, tolerance: f64) -> Self {
        GradReport {
            op_name: op_name.to_string(),
            max_rel_error: f64::INFINITY,
            max_abs_error: f64::INFINITY,
            passed: false,
            tolerance,
        }
    }
}

/// Step used for the central difference at `x`: `cbrt(eps) * max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Checks every input of `op` at the point `inputs`.
///
/// The error of each gradient entry is `|a - n| / max(|a|, |n|, 1)`, so
/// entries below unit magnitude are held to an absolute bound.
///
/// A non-scalar output is reduced with a fixed random projection
/// `sum(r * op(inputs))`, so the check covers the full Jacobian-vector
/// product. Failures (including ops that error at the probe point) are
/// reported through `passed`, never returned as errors.
pub fn grad_check<F>(op_name: &str, op: F, inputs: &[Tensor], tolerance: f64) -> GradReport
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    match run(&op, inputs) {
        Ok((analytic, numeric)) => {
            let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
            for (a, n) in analytic.iter().flatten().zip(numeric.iter().flatten()) {
                let abs = (a - n).abs();
                max_abs = max_abs.max(abs);
                max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(1.0));
            }
            GradReport::new(op_name, max_rel, max_abs, tolerance)
        }
        Err(_) => GradReport::failed(op_name, tolerance),
    }
}

type Grads = Vec<Vec<f64>>;

fn run<F>(op: &F, inputs: &[Tensor]) -> Result<(Grads, Grads)>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let out = op(&leaves)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let proj: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(0.5..1.5)).collect();
    let proj_t = Tensor::from_vec(out.shape(), proj.clone())?;
    out.mul(&proj_t)?.sum()?.backward()?;
    let analytic: Grads = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let numeric = no_grad(|| -> Result<Grads> {
        let mut all = Vec::with_capacity(inputs.len());
        for (i, input) in inputs.iter().enumerate() {
            let mut g = Vec::with_capacity(input.numel());
            for j in 0..input.numel() {
                let x = input.data()[j];
                let h = fd_step(x);
                let (xp, xm) = (x + h, x - h);
                let eval = |v: f64| -> Result<Tensor> {
                    let mut args: Vec<Tensor> = inputs.to_vec();
                    let mut d = input.to_vec();
                    d[j] = v;
                    args[i] = Tensor::from_vec(input.shape(), d)?;
                    op(&args)
                };
                let (yp, ym) = (eval(xp)?, eval(xm)?);
                // Difference per element before projecting keeps untouched outputs exact.
                let diff: f64 = yp.data().iter().zip(ym.data()).zip(&proj).map(|((a, b), r)| r * (a - b)).sum();
                g.push(diff / (xp - xm));
            }
            all.push(g);
        }
        Ok(all)
    })?;
    Ok((analytic, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_passes_tight_tolerance() {
        let x = Tensor::from_vec(&[5], vec![0.3, -1.2, 2.5, 0.0, 7.0]).unwrap();
        let r = grad_check("mul_scalar", |a| a[0].mul_scalar(3.0), &[x], 1e-10);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let x = Tensor::from_vec(&[4], vec![-0.7, 0.4, 1.3, -2.2]).unwrap();
        let r = grad_check("relu", |a| a[0].relu(), &[x], 1e-6);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn relu_at_kink_is_reported_not_passing() {
        let x = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let r = grad_check("relu", |a| a[0].relu(), &[x], 1e-6);
        assert!(!r.passed);
        assert!(r.max_abs_error > 0.1);
    }

    #[test]
    fn erroring_op_reports_failure() {
        let x = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let r = grad_check("bad", |a| a[0].reshape(&[3]), &[x], 1e-6);
        assert!(!r.passed);
    }
}
