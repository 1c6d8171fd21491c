//! Dense row-major `f32` tensor.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Dense n-dimensional tensor of 32-bit floats in row-major order.
///
/// The payload length always equals the product of the shape, and every
/// dimension is at least 1. Values are finite: [`Tensor::new`] rejects
/// NaN and infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: Vec::new(),
            reason: "rank must be at least 1",
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be at least 1",
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows",
        })
}

impl Tensor {
    /// Builds a tensor, validating the shape, payload length and finiteness.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                expected: vec![len],
                actual: vec![data.len()],
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for payloads produced by this crate's own kernels.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let len = check_shape(shape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the payload. The caller owns the tensor exclusively
    /// and is responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same payload under a new shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: self.shape,
                actual: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Returns the four dimensions of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a rank-4 tensor",
            }),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match *self.shape.as_slice() {
            [a, b] => Ok([a, b]),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a rank-2 tensor",
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies rows `[start, start + count)` along the leading axis.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self> {
        let outer = self.shape[0];
        if count == 0 || start + count > outer {
            return Err(Error::InvalidArgument(alloc::format!(
                "slice [{start}, {}) out of range for leading dimension {outer}",
                start + count
            )));
        }
        let inner = self.data.len() / outer;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..(start + count) * inner].to_vec(),
        })
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn gather_outer(&self, indices: &[usize]) -> Result<Self> {
        let outer = self.shape[0];
        let inner = self.data.len() / outer;
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty gather".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= outer {
                return Err(Error::InvalidArgument(alloc::format!(
                    "row {i} out of range for leading dimension {outer}"
                )));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    expected: first.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_outer(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot concatenate zero tensors".into()))?;
        let mut data = Vec::new();
        let mut outer = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: first.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            outer += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Tensor { shape, data })
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }
}
