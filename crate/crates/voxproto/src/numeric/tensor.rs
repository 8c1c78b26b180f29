//! Dense row-major f64 tensors.
//!
//! `Tensor` is an immutable value type: the payload sits behind an `Arc`, so
//! clones and reshapes are cheap and autodiff nodes can keep the values they
//! saw at forward time without copying.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the extents multiply to the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    /// Like [`Tensor::new`] but panics; for shapes the caller just computed.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor::new(shape, data).expect("internal tensor construction")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; numel]) }
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable payload access for in-place parameter updates; copies first
    /// when the buffer is shared with other tensor handles.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Scalar payload; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with shape {:?}", self.shape);
        self.data[0]
    }

    /// Same data, new shape. Fails if the element count changes.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }

    /// Element at a multi-index; panics on rank or bounds mismatch.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (d, (&i, &e)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(i < e, "index {} out of bounds for axis {} (extent {})", i, d, e);
            off = off * e + i;
        }
        self.data[off]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Maximum absolute difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major strides for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.numel() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{} elements, first={:.6}]",
                self.shape,
                self.numel(),
                self.data[0]
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"));
    }

    #[test]
    fn strides_are_row_major() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(strides_for(&[]), Vec::<usize>::new());
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4, 2]).is_err());
    }
}
