//! Dense row-major tensors over 64-bit floats.
//!
//! Everything in the kernel runs on `f64`: the minimizer oracles and the
//! finite-difference checks need tolerances (1e-4, 1e-6) that 32-bit
//! arithmetic cannot hold. Reductions always run in index order so repeated
//! runs are bitwise identical.

use super::KernelError;

/// A dense tensor: a shape plus contiguous row-major `f64` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Builds a tensor from raw storage, checking the length invariant.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, KernelError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(KernelError::ShapeMismatch {
                context: "from_vec",
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// 1-D column vector view of a slice, shaped `[len, 1]`.
    pub fn column(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len(), 1],
            data: values.to_vec(),
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor (or length of a 1-D one).
    pub fn nrows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of columns of a 2-D tensor; 1 for 1-D tensors.
    pub fn ncols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.ncols();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.ncols();
        &mut self.data[r * w..(r + 1) * w]
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &'static str) -> Result<(), KernelError> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(KernelError::NonFinite { context });
            }
        }
        Ok(())
    }
}
