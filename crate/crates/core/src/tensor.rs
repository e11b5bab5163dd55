//! Dense row-major `f32` tensor shared by every pipeline stage.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A self-describing dense array of `f32` in row-major order.
///
/// Construction validates that the shape is non-empty, that every dimension
/// is at least one, that the data length matches, and that all values are
/// finite. A `Tensor` is immutable once built unless taken apart with
/// [`Tensor::into_parts`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = checked_len(&shape)?;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = checked_len(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; len],
        })
    }

    pub fn scalar(value: f32) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false: every dimension is at least one.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }

    /// Fails with [`Error::ShapeMismatch`] unless the rank equals `rank`.
    pub fn expect_rank(&self, what: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::ShapeMismatch {
                what,
                expected: vec![0; rank],
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected = checked_len(&shape)?;
        if expected != self.data.len() {
            return Err(Error::LengthMismatch {
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::EmptyShape);
    }
    let mut len = 1usize;
    for (index, &dim) in shape.iter().enumerate() {
        if dim == 0 {
            return Err(Error::ZeroDimension { index });
        }
        len = len.checked_mul(dim).ok_or(Error::InvalidParameter {
            name: "shape",
            reason: "element count overflows usize",
        })?;
    }
    Ok(len)
}
