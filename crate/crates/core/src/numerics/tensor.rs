//! The tensor value type: shape plus row-major `f32` storage behind an `Arc`.
//!
//! Tensors are immutable once built. Cloning is cheap (the buffer is shared),
//! and the shared allocation doubles as the leaf identity the tape uses to
//! accumulate gradients: every handle cloned from the same parameter reports
//! the same gradient slot.

use std::fmt;
use std::sync::Arc;

use crate::error::{DyError, Result};

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    /// (tape id, node index) when this value was produced by a tape.
    pub(crate) node: Option<(u64, usize)>,
}

impl Tensor {
    /// Build a tensor from a shape and matching row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if numel != data.len() {
            return Err(DyError::invalid(format!(
                "tensor shape {:?} wants {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = checked_numel(shape)?;
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let numel = checked_numel(shape)?;
        Tensor::from_vec(shape, vec![value; numel])
    }

    /// A single-element tensor holding `value`.
    pub fn scalar(value: f32) -> Self {
        Tensor::from_vec(&[1], vec![value]).expect("scalar construction cannot fail")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn buffer(&self) -> &Arc<Vec<f32>> {
        &self.data
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f32>>) -> Self {
        Tensor {
            shape,
            data,
            requires_grad: false,
            node: None,
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(DyError::invalid(format!(
                "expected a scalar, found shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Same buffer, with the gradient flag set as given. Used to mark
    /// parameters before building a graph.
    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Same buffer, seen by any tape as a plain constant: no gradient flows
    /// through the detached handle even if the original is a parameter.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    /// Identity of the underlying allocation; the gradient-map key.
    pub(crate) fn key(&self) -> usize {
        Arc::as_ptr(&self.data) as *const f32 as usize
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(DyError::invalid("tensor rank must be at least 1"));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DyError::invalid(format!("tensor shape {shape:?} overflows")))
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}",
            self.shape, self.requires_grad
        )?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", &self.data[..])?;
        }
        write!(f, ")")
    }
}

/// Largest elementwise |a - b| between two same-shaped tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff wants matching shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

/// Largest |a - b| / (|b| + floor); the relative metric the equivalence
/// checks are stated in.
pub fn max_rel_diff(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_diff wants matching shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs() / ((y as f64).abs() + floor))
        .fold(0.0, f64::max)
}
