//! Dense row-major tensors.

use crate::error::{Error, Result};

/// A dense row-major tensor. Activations use NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Number of elements implied by `shape`, or `None` on overflow.
pub fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = checked_numel(shape).expect("tensor size overflow");
        Self {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = checked_numel(shape).expect("tensor size overflow");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        match checked_numel(shape) {
            Some(n) if n == data.len() => Ok(Self {
                shape: shape.to_vec(),
                data,
            }),
            _ => Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            ))),
        }
    }

    pub fn scalar_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if checked_numel(shape) != Some(self.data.len()) {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Size of one slice along axis 0 (product of the trailing dims).
    pub fn inner_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Keep only the listed indices along `axis`, in the given order.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Tensor<T> {
        assert!(axis < self.rank(), "axis out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let dim = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                assert!(i < dim, "index {i} out of range for axis of size {dim}");
                let start = (o * dim + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        Tensor { shape, data }
    }

    /// Inverse of [`Tensor::select`]: place `self` into a tensor whose `axis`
    /// has size `full`, filling the positions not listed with `fill`.
    pub fn expand(&self, axis: usize, indices: &[usize], full: usize, fill: T) -> Tensor<T> {
        assert_eq!(self.shape[axis], indices.len());
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut out = Tensor::full(&shape, fill);
        for o in 0..outer {
            for (src, &dst) in indices.iter().enumerate() {
                let s = (o * indices.len() + src) * inner;
                let d = (o * full + dst) * inner;
                out.data[d..d + inner].copy_from_slice(&self.data[s..s + inner]);
            }
        }
        out
    }
}

impl Tensor<f32> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v as f64)
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v as f32)
    }
}
