use serde::{Deserialize, Serialize};

use super::{shape_err, DiffError, Real};

/// Dense row-major tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, DiffError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(x: F) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View as a matrix: rank 0 is `1x1`, rank 1 is a row vector, higher ranks
    /// fold every leading dimension into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn row(&self, r: usize) -> &[F] {
        let (_, c) = self.dims2();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}
