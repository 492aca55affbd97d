//! Dense row-major matrices with a reverse-mode differentiation tape.
//!
//! Every tensor is two dimensional: column vectors are `n x 1` and scalars are
//! `1 x 1`. The primitive set is closed (see [`OpKind`]) so that each backward
//! rule can be checked against finite differences.

mod gradcheck;
mod ops;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{forward, OpKind};
pub use params::{AdamConfig, Bindings, ParamStore};
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Checkpoint representation: `{"shape":[rows, cols], "data":[...]}`.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        let (rows, cols) = match r.shape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Parse(format!(
                    "tensor shape must have 1 or 2 dims, got {other:?}"
                )))
            }
        };
        Tensor::from_vec(rows, cols, r.data)
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr {
            shape: vec![t.rows, t.cols],
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimMismatch(format!(
                "shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn column(v: &[f64]) -> Self {
        Tensor {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn row(v: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[&[f64]]) -> Result<Self> {
        let cols = columns.len();
        let mut t = Tensor::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::DimMismatch(format!(
                    "column {j} has length {}, expected {rows}",
                    c.len()
                )));
            }
            for (i, v) in c.iter().enumerate() {
                t.data[i * cols + j] = *v;
            }
        }
        Ok(t)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Scalar value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Selects the given columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Tensor> {
        let mut out = Tensor::zeros(self.rows, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            if c >= self.cols {
                return Err(Error::NodeOutOfRange {
                    node: c,
                    len: self.cols,
                });
            }
            for r in 0..self.rows {
                out.data[r * cols.len() + j] = self.data[r * self.cols + c];
            }
        }
        Ok(out)
    }
}
