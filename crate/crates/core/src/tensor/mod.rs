//! Dense matrices with reverse-mode differentiation.

mod matrix;
pub mod ops;
mod tape;

pub use matrix::Matrix;
pub use ops::{
    add_row_bias, affine, apply_activation, bce_sum, concat_cols, concat_rows, matmul, row_average, row_softmax_masked,
    rowwise_dot, scale_rows, sigmoid, Activation, BCE_EPS, LEAKY_SLOPE,
};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("softmax mask has no live positions")]
    AllMasked,
    #[error("{op} over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("backward requires a 1x1 loss, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::Matrix;

    /// Central differences of `f` with respect to every entry of `x`.
    pub fn numeric(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.as_slice()[i];
            probe.as_mut_slice()[i] = orig + step;
            let up = f(&probe);
            probe.as_mut_slice()[i] = orig - step;
            let down = f(&probe);
            probe.as_mut_slice()[i] = orig;
            out.as_mut_slice()[i] = (up - down) / (2.0 * step);
        }
        out
    }

    pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
        analytic
            .as_slice()
            .iter()
            .zip(numeric.as_slice())
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{max_rel_err, numeric};
    use super::*;
    use proptest::prelude::*;
    use std::rc::Rc;

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    /// Scalar loss touching every tape op; `w` is 3×2, `table` is 4×3.
    fn composite<'t>(tape: &'t Tape, w: Var<'t>, table: Var<'t>) -> Var<'t> {
        let x = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        let x = Var::concat_rows(&[x, tape.constant(Matrix::from_rows(&[[0.5, 0.2, -0.4]]).unwrap())]).unwrap();
        let b = tape.constant(Matrix::from_rows(&[[0.1, -0.2]]).unwrap());
        let h = x.affine(w, b).unwrap().activate(Activation::Tanh).unwrap();
        let mask: Rc<[bool]> = Rc::from(vec![true, true, false]);
        let s = h.matmul(w.t()).unwrap().softmax_masked(Some(mask)).unwrap();
        let avg = s.row_average().unwrap();
        let scaled = h.scale_rows(avg).unwrap().activate(Activation::LeakyRelu(0.01)).unwrap();
        let dots = scaled.rowwise_dot(h).unwrap();
        let wide = Var::concat_cols(&[dots, avg.scale(0.5).unwrap()]).unwrap();
        let row = wide.t().row_average().unwrap().t().broadcast_rows(2).unwrap();
        let stacked = Var::concat_rows(&[wide, row]).unwrap();
        let p = stacked.activate(Activation::Sigmoid).unwrap();
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let relu = h.activate(Activation::Relu).unwrap().sum();
        p.bce_sum(&z).unwrap().add(relu).unwrap()
    }

    fn eval(w: &Matrix, table: &Matrix) -> f64 {
        let tape = Tape::new();
        let (w, t) = (tape.constant(w.clone()), tape.constant(table.clone()));
        composite(&tape, w, t).scalar().unwrap()
    }

    fn fixture() -> (Matrix, Matrix) {
        let w = Matrix::from_rows(&[[0.4, -0.3], [0.25, 0.6], [-0.5, 0.15]]).unwrap();
        let t = Matrix::from_rows(&[[0.3, -0.7, 1.1], [0.9, 0.1, 0.2], [-0.6, 0.8, 0.35], [1.0, 1.0, 1.0]]).unwrap();
        (w, t)
    }

    #[test]
    fn finite_differences_match_tape() {
        let (w0, t0) = fixture();
        let tape = Tape::new();
        let (w, t) = (tape.param(w0.clone()), tape.param(t0.clone()));
        let grads = composite(&tape, w, t).backward().unwrap();
        let num_w = numeric(&w0, 1e-5, |w| eval(w, &t0));
        let num_t = numeric(&t0, 1e-5, |t| eval(&w0, t));
        assert!(max_rel_err(&grads.wrt(w), &num_w) < 1e-4);
        assert!(max_rel_err(&grads.wrt(t), &num_t) < 1e-4);
        // rows 1 and 3 are never gathered
        assert!(grads.wrt(t).row(1).iter().all(|&v| v == 0.0));
        assert!(grads.wrt(t).row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replay_is_bit_identical() {
        let (w, t) = fixture();
        assert_eq!(eval(&w, &t).to_bits(), eval(&w, &t).to_bits());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(2, 3), b in small_matrix(3, 4), c in small_matrix(4, 2)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }

        #[test]
        fn softmax_rows_are_distributions(x in small_matrix(3, 5), mask in proptest::collection::vec(any::<bool>(), 5)) {
            prop_assume!(mask.iter().any(|&m| m));
            let s = row_softmax_masked(&x, Some(&mask)).unwrap();
            for r in 0..3 {
                let total: f64 = s.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                for (j, &live) in mask.iter().enumerate() {
                    if !live {
                        prop_assert_eq!(s.get(r, j), 0.0);
                    }
                }
            }
        }

        #[test]
        fn tape_gradients_match_finite_differences(w0 in small_matrix(3, 2)) {
            let (_, t0) = fixture();
            let tape = Tape::new();
            let (w, t) = (tape.param(w0.clone()), tape.constant(t0.clone()));
            let analytic = composite(&tape, w, t).backward().unwrap().wrt(w);
            let num = numeric(&w0, 1e-5, |w| eval(w, &t0));
            // relu/leaky kinks make isolated probes unreliable; compare in absolute terms near them
            let err = analytic.as_slice().iter().zip(num.as_slice())
                .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
                .fold(0.0, f64::max);
            prop_assert!(err < 1e-4, "err {err}");
        }
    }
}
