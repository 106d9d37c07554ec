use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, ContractViolation};

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, ContractViolation> {
        let expected: usize = dims.iter().product();
        ensure!(
            expected == data.len(),
            "dims {:?} need {} values, got {}",
            dims,
            expected,
            data.len()
        );
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent, i.e. the number of rows of a batch.
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let width = self.row_width();
        &self.data[i * width..(i + 1) * width]
    }

    fn row_width(&self) -> usize {
        self.dims[1..].iter().product()
    }

    /// Copies the listed rows into a new tensor of the same trailing shape.
    pub fn gather_rows(&self, indices: &[usize]) -> Self {
        let width = self.row_width();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut dims = self.dims.clone();
        dims[0] = indices.len();
        Self { dims, data }
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let width = self.row_width();
        let mut dims = self.dims.clone();
        dims[0] = end - start;
        Self {
            dims,
            data: self.data[start * width..end * width].to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
