use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::probe::{self, Ticket};

#[derive(Debug)]
struct Storage {
    values: Vec<f64>,
    _ticket: Option<Ticket>,
}

/// Immutable dense row-major array of `f64` with shape metadata.
///
/// Cloning is cheap: the buffer is shared.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Arc<Storage>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim("tensor", shape, &[values.len()]));
        }
        Ok(Self::from_parts(shape.to_vec(), values))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let ticket = probe::register(values.len());
        Self {
            shape,
            storage: Arc::new(Storage {
                values,
                _ticket: ticket,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self::from_parts(vec![values.len()], values)
    }

    /// Builds a matrix from rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", &[cols], &[bad.len()]));
        }
        let values = rows.iter().flatten().copied().collect();
        Ok(Self::from_parts(vec![rows.len(), cols], values))
    }

    pub fn identity(n: usize) -> Self {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.storage.values
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.storage.values.clone()
    }

    pub fn numel(&self) -> usize {
        self.storage.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.storage.values[0]
    }

    /// `(rows, cols)` for a 2-D tensor; a 1-D tensor is treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            other => Err(Error::dim("dims2", other, &[0, 0])),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let cols = *self.shape.last().unwrap_or(&1);
        self.storage.values[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.storage.values[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        if data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, data.len())
        }
    }
}
