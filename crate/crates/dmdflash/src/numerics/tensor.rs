//! Dense row-major f64 tensors.
//!
//! A tensor optionally carries a handle into the active [`Tape`](super::Tape);
//! tensors without a handle behave as constants under differentiation.

use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

/// Dense n-dimensional value, row-major, 64-bit.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new".into()));
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeId>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable data access. Mutation severs any tape linkage: the result is a
    /// fresh constant value.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn value(&self) -> f64 {
        assert!(self.is_scalar(), "value() on non-scalar tensor");
        self.data[0]
    }

    /// Copy of this tensor with no tape participation.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.into()))
        }
    }

    /// Row `i` of a matrix-shaped tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() on non-matrix tensor");
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    /// Stack rows (all of equal length) into a `[rows, cols]` matrix constant.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows in from_rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }
}
