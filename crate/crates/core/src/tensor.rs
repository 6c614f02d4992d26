//! Minimal dense `[batch, time, channel]` storage used between packing and the sMLP.

use crate::{Error, Result};

/// Row-major 3D array; the last axis is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "{} values for tensor of shape {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, b: usize, t: usize) -> usize {
        (b * self.dims[1] + t) * self.dims[2]
    }

    /// Channel vector at `(b, t)`.
    #[inline]
    pub fn at(&self, b: usize, t: usize) -> &[f64] {
        let o = self.offset(b, t);
        &self.data[o..o + self.dims[2]]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let o = self.offset(b, t);
        let c = self.dims[2];
        &mut self.data[o..o + c]
    }

    /// All time steps of batch row `b`, flattened `[time, channel]`.
    #[inline]
    pub fn row(&self, b: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.dims[1] * self.dims[2];
        &mut self.data[b * n..(b + 1) * n]
    }
}
