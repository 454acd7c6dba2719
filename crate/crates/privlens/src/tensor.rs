//! Dense row-major tensors used throughout the crate.

use num_complex::Complex64;

use crate::{Error, Result};

/// Real-valued tensor with arbitrary rank, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.dims.is_empty()
    }

    pub fn as_scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
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

    /// Index into a rank-2 tensor.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_in_place(&mut self, other: &Tensor) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// `self += s * other`, the SGD/accumulation workhorse.
    pub fn axpy_in_place(&mut self, s: f64, other: &Tensor) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Complex-valued tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor {
    dims: Vec<usize>,
    data: Vec<Complex64>,
}

impl CTensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        CTensor {
            dims: dims.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<Complex64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "ctensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(CTensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_real(t: &Tensor) -> Self {
        CTensor {
            dims: t.dims().to_vec(),
            data: t.data().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn real_part(&self) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|c| c.re).collect(),
        }
    }

    pub fn norm_sqr_sum(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}
