//! Dense row-major f32 tensors.
//!
//! The last axis is fastest-varying. Volumes are stored as `[N, C, X, Y, Z]`
//! with the axial axis (`Z`) last, matching the on-disk dataset layout.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{context}: shape mismatch on axis {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("{context}: expected rank {expected}, got {got}")]
    RankMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("invalid stride {0}: must be 1 or 2")]
    InvalidStride(usize),
    #[error("invalid kernel extent {0}: spatial extent is fixed at 3")]
    KernelExtent(usize),
    #[error("zero extent in shape: all extents must be positive")]
    ZeroExtent,
    #[error("batchnorm eval mode requires trained or loaded running statistics")]
    UninitializedStats,
    #[error("backward requested without a recorded forward pass")]
    EmptyTape,
    #[error("backward root must be a scalar, got {0} elements")]
    NonScalarRoot(usize),
}

/// Dense tensor: an extent list plus a flat row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent);
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extent along `axis`.
    pub fn extent(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Boundary check used at module entry points, not per element per op.
    pub fn check_finite(&self, context: &str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    pub fn expect_rank(&self, rank: usize, context: &'static str) -> Result<(), TensorError> {
        if self.rank() != rank {
            return Err(TensorError::RankMismatch {
                context,
                expected: rank,
                got: self.rank(),
            });
        }
        Ok(())
    }

    pub fn expect_extent(
        &self,
        axis: usize,
        expected: usize,
        context: &'static str,
    ) -> Result<(), TensorError> {
        if self.shape[axis] != expected {
            return Err(TensorError::ShapeMismatch {
                context,
                axis,
                expected,
                got: self.shape[axis],
            });
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize], context: &'static str) -> Result<(), TensorError> {
        self.expect_rank(shape.len(), context)?;
        for (axis, &expected) in shape.iter().enumerate() {
            self.expect_extent(axis, expected, context)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::DataLength {
                expected: 6,
                got: 5
            }
        ));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            Tensor::from_vec(&[2, 0], vec![]),
            Err(TensorError::ZeroExtent)
        ));
    }

    #[test]
    fn finite_check_names_context() {
        let t = Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        let err = t.check_finite("input volume").unwrap_err();
        assert!(err.to_string().contains("input volume"));
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let t = Tensor::zeros(&[2, 3]);
        let err = t.expect_extent(1, 4, "linear input").unwrap_err();
        assert!(err.to_string().contains("axis 1"));
    }
}
