//! Dense row-major tensors with an optional gradient accumulator.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense tensor. Values are stored row-major; `grad`, when present,
/// always has the same element count as `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    values: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, enforcing positive dimensions, the shape/count
    /// match, and finiteness of every element.
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {numel} values, got {}", values.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction".into(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        debug_assert!(shape.iter().all(|&d| d > 0));
        Tensor {
            shape,
            values: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        debug_assert!(shape.iter().all(|&d| d > 0));
        Tensor {
            shape,
            values: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// A rank-1 tensor of shape `[1]` holding one value.
    pub fn scalar(value: S) -> Self {
        Tensor::filled(vec![1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Dimension `i`, or 1 when the rank is smaller.
    pub fn dim(&self, i: usize) -> usize {
        self.shape.get(i).copied().unwrap_or(1)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.values.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    /// Little-endian byte image of the values, used for bitwise comparisons
    /// and checkpointing.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * S::WIDTH.bytes());
        for &v in &self.values {
            v.append_le_bytes(&mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_count_mismatch_rejected() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn zero_dimension_rejected() {
        let err = Tensor::<f64>::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn non_finite_values_rejected() {
        let err = Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn grad_accumulates_across_calls() {
        let mut t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 1.5, 1.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
