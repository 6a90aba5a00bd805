use std::fmt;

use crate::scalar::Scalar;

use super::AutodiffError;

/// Dense row-major array.
///
/// Every operation in the engine works on rank-2 arrays; vectors are stored
/// as `[n, 1]` columns and scalars as `[1, 1]`.
#[derive(Clone, PartialEq)]
pub struct DenseArray<S> {
    shape: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> DenseArray<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || expected != values.len() {
            return Err(AutodiffError::InvalidShape {
                shape,
                len: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    /// Panics when `values.len() != rows * cols` or a dimension is zero.
    pub fn matrix(rows: usize, cols: usize, values: Vec<S>) -> Self {
        assert!(rows > 0 && cols > 0, "dimensions must be positive");
        assert_eq!(rows * cols, values.len(), "matrix value count");
        Self {
            shape: vec![rows, cols],
            values,
        }
    }

    pub fn column(values: Vec<S>) -> Self {
        let n = values.len();
        Self::matrix(n, 1, values)
    }

    pub fn scalar(value: S) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::matrix(rows, cols, vec![S::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self::matrix(rows, cols, vec![value; rows * cols])
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            shape: other.shape.clone(),
            values: vec![S::zero(); other.values.len()],
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, AutodiffError> {
        let cols = rows.first().map_or(0, Vec::len);
        let values: Vec<S> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AutodiffError::InvalidShape {
                shape: vec![rows.len(), cols],
                len: values.len(),
            });
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> S {
        self.values[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[S] {
        let c = self.cols();
        &self.values[row * c..(row + 1) * c]
    }

    /// Row `r` as an `[cols, 1]` column vector.
    pub fn row_as_column(&self, r: usize) -> Self {
        Self::column(self.row(r).to_vec())
    }

    /// Single value of a `[1, 1]` array.
    pub fn item(&self) -> Option<S> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> S {
        self.values.iter().map(|&v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, by: S) {
        for v in &mut self.values {
            *v = *v * by;
        }
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = S::zero());
    }

    pub fn cast<T: Scalar>(&self) -> DenseArray<T> {
        DenseArray {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .map(|v| T::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

impl<S: fmt::Debug> fmt::Debug for DenseArray<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseArray{:?}{:?}", self.shape, self.values)
    }
}
