//! Forward kernels shared by the eager API and the gradient tape.

use super::matrix::{matmul_raw, Matrix};
use super::TensorError;

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Default negative slope for [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// Negative-side slope, expected in `(0, 1)`.
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(m: Matrix, op: &'static str) -> Result<Matrix, TensorError> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols() != b.rows() {
        return Err(TensorError::ShapeMismatch { op: "matmul", left: a.shape(), right: b.shape() });
    }
    check_finite(matmul_raw(a, b), "matmul")
}

pub fn add_row_bias(x: &Matrix, bias: &Matrix) -> Result<Matrix, TensorError> {
    if bias.rows() != 1 || bias.cols() != x.cols() {
        return Err(TensorError::ShapeMismatch { op: "add_row_bias", left: x.shape(), right: bias.shape() });
    }
    let mut out = x.clone();
    let b = bias.as_slice();
    for r in 0..out.rows() {
        for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
            *o += bv;
        }
    }
    check_finite(out, "add_row_bias")
}

/// `x · w + b` with `b` broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(TensorError::ShapeMismatch { op: "affine", left: w.shape(), right: b.shape() });
    }
    add_row_bias(&matmul(x, w)?, b)
}

pub fn apply_activation(kind: Activation, x: &Matrix) -> Result<Matrix, TensorError> {
    check_finite(x.map(|v| kind.apply(v)), "activation")
}

/// Row-wise softmax restricted to positions where `mask` is true; masked
/// positions are exactly zero. `None` means every position is live.
pub fn row_softmax_masked(x: &Matrix, mask: Option<&[bool]>) -> Result<Matrix, TensorError> {
    if let Some(mask) = mask {
        if mask.len() != x.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "row_softmax_masked",
                left: x.shape(),
                right: (1, mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::AllMasked);
        }
    } else if x.cols() == 0 {
        return Err(TensorError::EmptyAxis { op: "row_softmax_masked" });
    }
    let live = |j: usize| mask.is_none_or(|m| m[j]);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().enumerate().filter(|&(j, _)| live(j)).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
        let out_row = out.row_mut(r);
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if live(j) {
                let e = (v - max).exp();
                out_row[j] = e;
                total += e;
            }
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    check_finite(out, "row_softmax_masked")
}

/// Mean of each row, as a column vector.
pub fn row_average(x: &Matrix) -> Result<Matrix, TensorError> {
    if x.cols() == 0 {
        return Err(TensorError::EmptyAxis { op: "row_average" });
    }
    let n = x.cols() as f64;
    let data = (0..x.rows()).map(|r| x.row(r).iter().sum::<f64>() / n).collect();
    Ok(Matrix::from_vec_unchecked(x.rows(), 1, data))
}

pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix, TensorError> {
    let Some(first) = parts.first() else {
        return Err(TensorError::EmptyAxis { op: "concat_cols" });
    };
    let rows = first.rows();
    for p in parts {
        if p.rows() != rows {
            return Err(TensorError::ShapeMismatch { op: "concat_cols", left: first.shape(), right: p.shape() });
        }
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Ok(Matrix::from_vec_unchecked(rows, cols, data))
}

pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix, TensorError> {
    let Some(first) = parts.first() else {
        return Err(TensorError::EmptyAxis { op: "concat_rows" });
    };
    let cols = first.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(TensorError::ShapeMismatch { op: "concat_rows", left: first.shape(), right: p.shape() });
        }
        data.extend_from_slice(p.as_slice());
        rows += p.rows();
    }
    Ok(Matrix::from_vec_unchecked(rows, cols, data))
}

/// Multiplies row `j` of `x` by `scale[j]`; `scale` is a column vector.
pub fn scale_rows(x: &Matrix, scale: &Matrix) -> Result<Matrix, TensorError> {
    if scale.cols() != 1 || scale.rows() != x.rows() {
        return Err(TensorError::ShapeMismatch { op: "scale_rows", left: x.shape(), right: scale.shape() });
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let s = scale.get(r, 0);
        for v in out.row_mut(r) {
            *v *= s;
        }
    }
    check_finite(out, "scale_rows")
}

/// Paired dot products of corresponding rows, as a column vector.
pub fn rowwise_dot(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op: "rowwise_dot", left: a.shape(), right: b.shape() });
    }
    let data = (0..a.rows()).map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum()).collect();
    check_finite(Matrix::from_vec_unchecked(a.rows(), 1, data), "rowwise_dot")
}

/// Summed binary cross-entropy with clamped probabilities.
pub fn bce_sum(p: &Matrix, z: &Matrix) -> Result<f64, TensorError> {
    if p.shape() != z.shape() {
        return Err(TensorError::ShapeMismatch { op: "bce_sum", left: p.shape(), right: z.shape() });
    }
    let mut total = 0.0;
    for (&pv, &zv) in p.as_slice().iter().zip(z.as_slice()) {
        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= zv * pc.ln() + (1.0 - zv) * (1.0 - pc).ln();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[0.3, -1.0], &[2.0, 5.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
        let p = matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(p, m(&[&[3.0], &[7.0]]));
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2));
        assert!(matches!(err, Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax_masked(&m(&[&[0.0, 0.0, 0.0]]), Some(&[true, true, true])).unwrap();
        for j in 0..3 {
            assert!((s.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = row_softmax_masked(&m(&[&[2f64.ln(), 0.0]]), Some(&[true, true])).unwrap();
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        let s = row_softmax_masked(&m(&[&[5.0, 9.0]]), Some(&[true, false])).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 0.0]);
        assert!(matches!(row_softmax_masked(&m(&[&[1.0, 2.0]]), Some(&[false, false])), Err(TensorError::AllMasked)));
    }

    #[test]
    fn masked_logits_do_not_leak() {
        let a = row_softmax_masked(&m(&[&[1.0, 700.0, -3.0]]), Some(&[true, false, true])).unwrap();
        let b = row_softmax_masked(&m(&[&[1.0, -9.0, -3.0]]), Some(&[true, false, true])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get(0, 1), 0.0);
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert!((Activation::LeakyRelu(0.01).apply(-2.0) + 0.02).abs() < 1e-16);
        assert_eq!(Activation::Relu.derivative(0.0, 0.0), 0.0);
    }

    #[test]
    fn affine_examples() {
        let x = m(&[&[1.5, -2.0]]);
        assert_eq!(affine(&x, &Matrix::identity(2), &Matrix::zeros(1, 2)).unwrap(), x);
        let y = affine(&m(&[&[1.0, 1.0]]), &m(&[&[1.0], &[2.0]]), &m(&[&[3.0]])).unwrap();
        assert_eq!(y, m(&[&[6.0]]));
        assert!(matches!(
            affine(&x, &Matrix::identity(2), &Matrix::zeros(1, 3)),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn row_average_examples() {
        let c = m(&[&[4.0], &[-1.0]]);
        assert_eq!(row_average(&c).unwrap(), c);
        assert_eq!(row_average(&m(&[&[1.0, 3.0], &[3.0, 1.0]])).unwrap(), m(&[&[2.0], &[2.0]]));
        assert!(matches!(row_average(&Matrix::zeros(2, 0)), Err(TensorError::EmptyAxis { .. })));
    }

    #[test]
    fn concat_examples() {
        let a = m(&[&[1.0]]);
        assert_eq!(concat_cols(&[&a]).unwrap(), a);
        assert_eq!(concat_cols(&[&a, &m(&[&[2.0]])]).unwrap(), m(&[&[1.0, 2.0]]));
        assert!(concat_cols(&[&a, &Matrix::zeros(2, 1)]).is_err());
    }

    #[test]
    fn bce_examples() {
        let z = m(&[&[1.0, 0.0]]);
        let loss = bce_sum(&z, &z).unwrap();
        let bound = 2.0 * 2.0 * BCE_EPS * -(BCE_EPS.ln());
        assert!(loss >= 0.0 && loss <= bound, "{loss} > {bound}");
        let l = bce_sum(&m(&[&[0.5]]), &m(&[&[1.0]])).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(bce_sum(&Matrix::zeros(1, 2), &Matrix::zeros(2, 1)).is_err());
    }
}
