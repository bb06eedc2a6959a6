//! Dense row-major f64 tensors.

use super::AutodiffError;

/// A dense tensor of 64-bit reals, row-major.
///
/// Scalars are represented as shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Panicking constructor for shapes known statically correct.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor::new(shape, data).expect("shape/data length mismatch")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar extraction; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows of the trailing axis, i.e. numel / last-dim. Shape `[n]` counts as n rows of width 1
    /// only when asked via `last_dim`; callers use (rows, cols) for 2-D work.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as a matrix `[rows, cols]`; errors when not 2-D.
    pub fn as_matrix(&self) -> Result<(usize, usize), AutodiffError> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(AutodiffError::NotAMatrix {
                shape: self.shape.clone(),
            })
        }
    }
}
