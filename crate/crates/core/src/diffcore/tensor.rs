//! Dense multi-dimensional 64-bit tensors with optional gradient storage.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A dense row-major tensor. `grad`, when present, always has the same
/// number of elements as `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from raw values; the length must equal the shape product.
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(CoreError::Config(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if values.len() != numel {
            return Err(CoreError::Config(format!(
                "tensor of shape {shape:?} needs {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Reset the gradient to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Allocate a zero gradient buffer if none exists; keeps any present one.
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
    }

    /// Add `delta` into the gradient buffer, allocating zeros first if needed.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(CoreError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }
}
