//! Pointwise unary and binary ops.
//!
//! Binary ops accept two tensors of identical shape, or one operand with a
//! single element which is treated as a scalar. Nothing else broadcasts; use
//! [`Tensor::expand`] to materialize a broadcast explicitly.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pairing {
    Same,
    RightScalar,
    LeftScalar,
}

fn pairing(op: &str, a: &Tensor, b: &Tensor) -> Result<Pairing> {
    if a.shape() == b.shape() {
        Ok(Pairing::Same)
    } else if b.numel() == 1 {
        Ok(Pairing::RightScalar)
    } else if a.numel() == 1 {
        Ok(Pairing::LeftScalar)
    } else {
        Err(dim_err!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
    }
}

/// Gradient for an operand that may have been used as a broadcast scalar.
fn reduce_for(p: Pairing, scalar_side: bool, g: Vec<f64>) -> Vec<f64> {
    let is_scalar = match p {
        Pairing::Same => false,
        Pairing::RightScalar => scalar_side,
        Pairing::LeftScalar => !scalar_side,
    };
    if is_scalar {
        vec![g.iter().sum()]
    } else {
        g
    }
}

/// Named pointwise operation, dispatched by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Relu,
    Silu,
    Add,
    Mul,
    /// Concatenation along the channel axis (axis 1).
    Concat,
}

/// Applies `op` to `inputs`. Unary ops take one input, `Add`/`Mul` two,
/// `Concat` one or more.
pub fn elementwise(op: Elementwise, inputs: &[&Tensor]) -> Result<Tensor> {
    let want = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(crate::TensorError::Usage(format!("{op:?} takes {n} inputs, got {}", inputs.len())));
        }
        Ok(())
    };
    match op {
        Elementwise::Sigmoid => want(1).and_then(|_| inputs[0].sigmoid()),
        Elementwise::Relu => want(1).and_then(|_| inputs[0].relu()),
        Elementwise::Silu => want(1).and_then(|_| inputs[0].silu()),
        Elementwise::Add => want(2).and_then(|_| inputs[0].add(inputs[1])),
        Elementwise::Mul => want(2).and_then(|_| inputs[0].mul(inputs[1])),
        Elementwise::Concat => Tensor::concat(inputs, 1),
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + 'static,
    ) -> Result<Tensor> {
        let y: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        let x = self.clone();
        let y_saved = y.clone();
        Tensor::from_op(op, self.shape().to_vec(), y, &[self], move |g| {
            let gx = g
                .iter()
                .zip(x.data())
                .zip(&y_saved)
                .map(|((gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let p = pairing("add", self, other)?;
        let (a, b) = (self.data(), other.data());
        let (shape, y): (Vec<usize>, Vec<f64>) = match p {
            Pairing::Same => (self.shape().to_vec(), a.iter().zip(b).map(|(x, y)| x + y).collect()),
            Pairing::RightScalar => (self.shape().to_vec(), a.iter().map(|x| x + b[0]).collect()),
            Pairing::LeftScalar => (other.shape().to_vec(), b.iter().map(|y| a[0] + y).collect()),
        };
        Tensor::from_op("add", shape, y, &[self, other], move |g| {
            vec![Some(reduce_for(p, false, g.to_vec())), Some(reduce_for(p, true, g.to_vec()))]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.neg()?)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let p = pairing("mul", self, other)?;
        let (a, b) = (self.data(), other.data());
        let (shape, y): (Vec<usize>, Vec<f64>) = match p {
            Pairing::Same => (self.shape().to_vec(), a.iter().zip(b).map(|(x, y)| x * y).collect()),
            Pairing::RightScalar => (self.shape().to_vec(), a.iter().map(|x| x * b[0]).collect()),
            Pairing::LeftScalar => (other.shape().to_vec(), b.iter().map(|y| a[0] * y).collect()),
        };
        let (sa, sb) = (self.clone(), other.clone());
        Tensor::from_op("mul", shape, y, &[self, other], move |g| {
            let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
            let (da, db) = (sa.data(), sb.data());
            let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(db, i)).collect();
            let gb: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * at(da, i)).collect();
            vec![Some(reduce_for(p, false, ga)), Some(reduce_for(p, true, gb))]
        })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let y = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op("mul_scalar", self.shape().to_vec(), y, &[self], move |g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let y = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), y, &[self], |g| vec![Some(g.to_vec())])
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// Subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.unary(
            "silu",
            |x| x * sigmoid_scalar(x),
            |x, _| {
                let s = sigmoid_scalar(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// `1/x`; a zero input produces a numeric error.
    pub fn recip(&self) -> Result<Tensor> {
        self.unary("recip", |x| 1.0 / x, |_, y| -y * y)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Subgradient at exactly 0 is 0.
    pub fn abs(&self) -> Result<Tensor> {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let y = Tensor::scalar(0.0).sigmoid().unwrap();
        assert_eq!(y.item(), 0.5);
    }

    #[test]
    fn sigmoid_stays_open_interval_for_moderate_inputs() {
        let x = Tensor::from_vec(&[4], vec![-30.0, -1.0, 1.0, 30.0]).unwrap();
        for v in x.sigmoid().unwrap().data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn scalar_operand_broadcasts_and_reduces_grad() {
        let a = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = Tensor::param(&[1], vec![2.0]).unwrap();
        let y = a.mul(&s).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(s.grad().unwrap(), vec![6.0]);
        assert_eq!(a.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(a.add(&b), Err(crate::TensorError::Dimension(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::param(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        x.relu().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn dispatch_concat_on_channels() {
        let a = Tensor::zeros(&[2, 3, 4, 4]);
        let b = Tensor::zeros(&[2, 5, 4, 4]);
        let y = elementwise(Elementwise::Concat, &[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[2, 8, 4, 4]);
    }
}
