use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorstore::{Tensor, TensorMap};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        match t.shape() {
            [r, c] => Self::from_vec(*r, *c, t.to_vec()),
            s => Err(Error::Shape(format!("{name}: expected a matrix, found shape {s:?}"))),
        }
    }

    /// Load `name` from `map` and check its shape.
    pub fn load(map: &TensorMap, name: &str, rows: usize, cols: usize) -> Result<Self> {
        let m = Self::from_tensor(name, map.require(name)?)?;
        if m.rows != rows || m.cols != cols {
            return Err(Error::Shape(format!(
                "{name}: expected {rows}x{cols}, found {}x{}",
                m.rows, m.cols
            )));
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn scale(&mut self, c: S) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    /// `self · x`
    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[S]) -> Vec<S> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![S::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == S::zero() {
                continue;
            }
            axpy(&mut out, yr, self.row(r));
        }
        out
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[S], out: &mut [S]) {
        for (r, &yr) in y.iter().enumerate() {
            axpy(out, yr, self.row(r));
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_scalars(vec![self.rows, self.cols], &self.data)
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `y += a · x`
#[inline]
pub fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Load a 1-D tensor of length `len`.
pub fn load_vector<S: Scalar>(map: &TensorMap, name: &str, len: usize) -> Result<Vec<S>> {
    let t = map.require(name)?;
    if t.shape() != [len] {
        return Err(Error::Shape(format!(
            "{name}: expected [{len}], found {:?}",
            t.shape()
        )));
    }
    Ok(t.to_vec())
}
