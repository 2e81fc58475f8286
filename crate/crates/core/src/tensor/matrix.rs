use std::fmt;

use super::TensorError;

/// Dense row-major matrix of `f64`.
///
/// Every constructor rejects non-finite values, so a `Matrix` obtained
/// through the public API never holds NaN or infinity.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch { op: "new", left: (rows, cols), right: (data.len(), 1) });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self, TensorError> {
        Self::new(values.len(), 1, values.to_vec())
    }

    /// Row vector from a slice.
    pub fn row_vector(values: &[f64]) -> Result<Self, TensorError> {
        Self::new(1, values.len(), values.to_vec())
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sets one entry. Panics on a non-finite value.
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(v.is_finite(), "matrix entries must be finite");
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Plain matrix product without tape recording.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: self.shape(), right: other.shape() });
        }
        Ok(matmul_raw(self, other))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b`; caller guarantees the inner dimensions agree.
pub(crate) fn matmul_raw(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q, r) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a.data[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Matrix::from_vec_unchecked(p, r, out)
}

/// `a · bᵀ`; caller guarantees `a.cols == b.cols`.
pub(crate) fn matmul_nt_raw(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q, r) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let a_row = &a.data[i * q..(i + 1) * q];
        for j in 0..r {
            let b_row = &b.data[j * q..(j + 1) * q];
            out[i * r + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    Matrix::from_vec_unchecked(p, r, out)
}

/// `aᵀ · b`; caller guarantees `a.rows == b.rows`.
pub(crate) fn matmul_tn_raw(a: &Matrix, b: &Matrix) -> Matrix {
    let (q, p, r) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; p * r];
    for k in 0..q {
        let a_row = &a.data[k * p..(k + 1) * p];
        let b_row = &b.data[k * r..(k + 1) * r];
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out[i * r..(i + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
    Matrix::from_vec_unchecked(p, r, out)
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        let mut list = f.debug_list();
        for r in 0..self.rows {
            list.entry(&self.row(r));
        }
        list.finish()
    }
}
