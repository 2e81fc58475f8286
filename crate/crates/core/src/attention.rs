//! Label-based attention for one hierarchy level.
//!
//! Words and labels meet through a shared set of learned component
//! vectors. Each word is scored against every component (`S`), each label
//! is softly assigned to components (`R̃`), and their product yields a
//! per-label attention distribution over the words (`A`). The attended
//! words give one document embedding per label (`D`), which is gated by a
//! confidence mask predicted from the previous level and pooled into a
//! local and a global document vector.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Activation, Matrix, TensorError, Var, LEAKY_SLOPE};

/// How attention logits are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Label → component → word factorization.
    #[default]
    Full,
    /// Labels dotted with projected words directly; components unused.
    NoComponent,
}

/// Activation of the word and label projections `f_w` and `f_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    #[default]
    Tanh,
    Linear,
}

impl Projection {
    pub fn activation(self) -> Activation {
        match self {
            Projection::Tanh => Activation::Tanh,
            Projection::Linear => Activation::Identity,
        }
    }
}

/// Trainable tensors of one level. `T` is [`Matrix`] for stored values
/// and [`Var`] once bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams<T = Matrix> {
    /// `m × d_c`
    pub components: T,
    /// `q × d`, rows in `labels_at_level` order
    pub label_emb: T,
    /// `2d × d_c`
    pub fw_w: T,
    pub fw_b: T,
    /// `d × d_c`
    pub fl_w: T,
    pub fl_b: T,
    /// `d × d`
    pub fm_w: T,
    pub fm_b: T,
    /// `d × d`
    pub w: T,
    pub b: T,
}

pub const LEVEL_TENSOR_NAMES: [&str; 10] =
    ["components", "label_emb", "fw_w", "fw_b", "fl_w", "fl_b", "fm_w", "fm_b", "w", "b"];

impl<T> LevelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LevelParams<U> {
        LevelParams {
            components: f(&self.components),
            label_emb: f(&self.label_emb),
            fw_w: f(&self.fw_w),
            fw_b: f(&self.fw_b),
            fl_w: f(&self.fl_w),
            fl_b: f(&self.fl_b),
            fm_w: f(&self.fm_w),
            fm_b: f(&self.fm_b),
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    /// Tensors in [`LEVEL_TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&T; 10] {
        [
            &self.components,
            &self.label_emb,
            &self.fw_w,
            &self.fw_b,
            &self.fl_w,
            &self.fl_b,
            &self.fm_w,
            &self.fm_b,
            &self.w,
            &self.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut T; 10] {
        [
            &mut self.components,
            &mut self.label_emb,
            &mut self.fw_w,
            &mut self.fw_b,
            &mut self.fl_w,
            &mut self.fl_b,
            &mut self.fm_w,
            &mut self.fm_b,
            &mut self.w,
            &mut self.b,
        ]
    }

    pub fn from_tensors(t: [T; 10]) -> Self {
        let [components, label_emb, fw_w, fw_b, fl_w, fl_b, fm_w, fm_b, w, b] = t;
        Self { components, label_emb, fw_w, fw_b, fl_w, fl_b, fm_w, fm_b, w, b }
    }
}

/// Uniform `[-0.1, 0.1]`.
pub(crate) fn uniform_small(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-0.1..=0.1)).collect();
    Matrix::new(rows, cols, data).expect("finite draws")
}

/// Uniform `±sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Matrix::new(rows, cols, data).expect("finite draws")
}

impl LevelParams<Matrix> {
    /// Random initialization: embeddings small-uniform, weights Glorot,
    /// biases zero.
    pub fn init(labels: usize, components: usize, dim: usize, component_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            components: uniform_small(components, component_dim, rng),
            label_emb: uniform_small(labels, dim, rng),
            fw_w: glorot(2 * dim, component_dim, rng),
            fw_b: Matrix::zeros(1, component_dim),
            fl_w: glorot(dim, component_dim, rng),
            fl_b: Matrix::zeros(1, component_dim),
            fm_w: glorot(dim, dim, rng),
            fm_b: Matrix::zeros(1, dim),
            w: glorot(dim, dim, rng),
            b: Matrix::zeros(1, dim),
        }
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(labels: usize, components: usize, dim: usize, component_dim: usize) -> Self {
        Self {
            components: Matrix::zeros(components, component_dim),
            label_emb: Matrix::zeros(labels, dim),
            fw_w: Matrix::zeros(2 * dim, component_dim),
            fw_b: Matrix::zeros(1, component_dim),
            fl_w: Matrix::zeros(dim, component_dim),
            fl_b: Matrix::zeros(1, component_dim),
            fm_w: Matrix::zeros(dim, dim),
            fm_b: Matrix::zeros(1, dim),
            w: Matrix::zeros(dim, dim),
            b: Matrix::zeros(1, dim),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.label_emb.rows()
    }
}

/// Intermediates of one level for one document.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTrace {
    /// `N × m` component-word relevance; for [`AttentionVariant::NoComponent`]
    /// the projected words `N × d_c`.
    pub s: Matrix,
    /// `q × m` label-component association; absent without components.
    pub r_tilde: Option<Matrix>,
    /// `q × N` label-based word attention.
    pub a: Matrix,
    /// `q × d` label-based document embeddings.
    pub d: Matrix,
    /// `q × 1` label confidence mask.
    pub m: Matrix,
    /// `q × d` masked embeddings.
    pub d_tilde: Matrix,
    /// `d × 1` local document embedding.
    pub v_local: Matrix,
    /// `d × 1` global document embedding.
    pub v_global: Matrix,
}

/// Tape handles produced by [`level_forward`].
#[derive(Debug, Clone, Copy)]
pub struct LevelOutput<'t> {
    pub s: Var<'t>,
    pub r_tilde: Option<Var<'t>>,
    pub a: Var<'t>,
    pub d: Var<'t>,
    pub m: Var<'t>,
    pub d_tilde: Var<'t>,
    pub v_local: Var<'t>,
    pub v_global: Var<'t>,
}

impl LevelOutput<'_> {
    pub fn trace(&self) -> LevelTrace {
        LevelTrace {
            s: self.s.value().clone(),
            r_tilde: self.r_tilde.map(|r| r.value().clone()),
            a: self.a.value().clone(),
            d: self.d.value().clone(),
            m: self.m.value().clone(),
            d_tilde: self.d_tilde.value().clone(),
            v_local: self.v_local.value().clone(),
            v_global: self.v_global.value().clone(),
        }
    }
}

/// Prepends the previous level's local embedding to every word vector.
/// At level 1 (`v_prev = None`) the prefix is zero.
pub fn enrich_words<'t>(words: Var<'t>, v_prev: Option<Var<'t>>) -> Result<Var<'t>, TensorError> {
    let (n, d) = words.shape();
    let prefix = match v_prev {
        None => words.tape().constant(Matrix::zeros(n, d)),
        Some(v) => {
            if v.shape() != (d, 1) {
                return Err(TensorError::ShapeMismatch { op: "enrich_words", left: (d, 1), right: v.shape() });
            }
            v.t().broadcast_rows(n)?
        }
    };
    Var::concat_cols(&[prefix, words])
}

/// `S = f_w(enriched words) · componentsᵀ`, `N × m`.
pub fn component_word_relevance<'t>(
    enriched: Var<'t>,
    lp: &LevelParams<Var<'t>>,
    projection: Projection,
) -> Result<Var<'t>, TensorError> {
    let projected = enriched.affine(lp.fw_w, lp.fw_b)?.activate(projection.activation())?;
    projected.matmul(lp.components.t())
}

/// Returns `(R, R̃)` where `R = f_l(labels) · componentsᵀ` and `R̃` is its
/// row softmax.
pub fn label_component_association<'t>(
    lp: &LevelParams<Var<'t>>,
    projection: Projection,
) -> Result<(Var<'t>, Var<'t>), TensorError> {
    let projected = lp.label_emb.affine(lp.fl_w, lp.fl_b)?.activate(projection.activation())?;
    let r = projected.matmul(lp.components.t())?;
    Ok((r, r.softmax_masked(None)?))
}

/// `A = softmax_masked(R̃ · Sᵀ)`, `q × N`.
pub fn label_attention<'t>(r_tilde: Var<'t>, s: Var<'t>, mask: Rc<[bool]>) -> Result<Var<'t>, TensorError> {
    r_tilde.matmul(s.t())?.softmax_masked(Some(mask))
}

/// `D = relu(A · I · W + b)` over the base word embeddings `I`.
pub fn label_document_embeddings<'t>(
    a: Var<'t>,
    words: Var<'t>,
    lp: &LevelParams<Var<'t>>,
) -> Result<Var<'t>, TensorError> {
    a.matmul(words)?.affine(lp.w, lp.b)?.activate(Activation::Relu)
}

/// Per-label confidence from the previous level's local embedding; all
/// ones at level 1.
pub fn label_mask<'t>(v_prev: Option<Var<'t>>, lp: &LevelParams<Var<'t>>) -> Result<Var<'t>, TensorError> {
    let q = lp.label_emb.shape().0;
    match v_prev {
        None => Ok(lp.label_emb.tape().constant(Matrix::filled(q, 1, 1.0))),
        Some(v) => {
            let gate = v.t().affine(lp.fm_w, lp.fm_b)?.activate(Activation::LeakyRelu(LEAKY_SLOPE))?;
            lp.label_emb.matmul(gate.t())?.activate(Activation::Sigmoid)
        }
    }
}

/// Scales row `j` of `D` by `m[j]`.
pub fn apply_label_mask<'t>(d: Var<'t>, m: Var<'t>) -> Result<Var<'t>, TensorError> {
    d.scale_rows(m)
}

/// Column means of `D̃` and `D`, each `d × 1`.
pub fn pool_local_global<'t>(d_tilde: Var<'t>, d: Var<'t>) -> Result<(Var<'t>, Var<'t>), TensorError> {
    Ok((d_tilde.t().row_average()?, d.t().row_average()?))
}

/// Runs the whole module for one level.
pub fn level_forward<'t>(
    words: Var<'t>,
    mask: Rc<[bool]>,
    v_prev: Option<Var<'t>>,
    lp: &LevelParams<Var<'t>>,
    projection: Projection,
    variant: AttentionVariant,
) -> Result<LevelOutput<'t>, TensorError> {
    let enriched = enrich_words(words, v_prev)?;
    let (s, r_tilde, a) = match variant {
        AttentionVariant::Full => {
            let s = component_word_relevance(enriched, lp, projection)?;
            let (_, r_tilde) = label_component_association(lp, projection)?;
            let a = label_attention(r_tilde, s, mask)?;
            (s, Some(r_tilde), a)
        }
        AttentionVariant::NoComponent => {
            let words_proj = enriched.affine(lp.fw_w, lp.fw_b)?.activate(projection.activation())?;
            let labels_proj = lp.label_emb.affine(lp.fl_w, lp.fl_b)?.activate(projection.activation())?;
            let a = labels_proj.matmul(words_proj.t())?.softmax_masked(Some(mask))?;
            (words_proj, None, a)
        }
    };
    let d = label_document_embeddings(a, words, lp)?;
    let m = label_mask(v_prev, lp)?;
    let d_tilde = apply_label_mask(d, m)?;
    let (v_local, v_global) = pool_local_global(d_tilde, d)?;
    Ok(LevelOutput { s, r_tilde, a, d, m, d_tilde, v_local, v_global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{max_rel_err, numeric};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn bind<'t>(tape: &'t Tape, lp: &LevelParams) -> LevelParams<Var<'t>> {
        lp.map(|t| tape.param(t.clone()))
    }

    fn mask(bits: &[bool]) -> Rc<[bool]> {
        Rc::from(bits.to_vec())
    }

    #[test]
    fn enrich_examples() {
        let tape = Tape::new();
        let words = tape.constant(m(&[&[1.0, 2.0]]));
        assert_eq!(*enrich_words(words, None).unwrap().value(), m(&[&[0.0, 0.0, 1.0, 2.0]]));
        let v = tape.constant(m(&[&[3.0], &[4.0]]));
        assert_eq!(*enrich_words(words, Some(v)).unwrap().value(), m(&[&[3.0, 4.0, 1.0, 2.0]]));
        let bad = tape.constant(Matrix::zeros(3, 1));
        assert!(enrich_words(words, Some(bad)).is_err());
    }

    #[test]
    fn relevance_examples() {
        let tape = Tape::new();
        // d = 1 so enriched rows have width 2; d_c = 2, one component
        let mut lp = LevelParams::zeros(1, 1, 1, 2);
        lp.fw_w = Matrix::identity(2);
        lp.components = m(&[&[2.0, 0.0]]);
        let bound = bind(&tape, &lp);
        let enriched = tape.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let s = component_word_relevance(enriched, &bound, Projection::Linear).unwrap();
        assert_eq!(*s.value(), m(&[&[2.0], &[0.0]]));

        lp.components = Matrix::zeros(1, 2);
        let s = component_word_relevance(enriched, &bind(&tape, &lp), Projection::Tanh).unwrap();
        assert_eq!(*s.value(), Matrix::zeros(2, 1));

        let mut lp = LevelParams::zeros(1, 1, 1, 2);
        lp.components = m(&[&[5.0, -3.0]]);
        let s = component_word_relevance(enriched, &bind(&tape, &lp), Projection::Tanh).unwrap();
        assert_eq!(*s.value(), Matrix::zeros(2, 1));
    }

    #[test]
    fn association_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lp = LevelParams::init(3, 1, 4, 4, &mut rng);
        let (_, rt) = label_component_association(&bind(&tape, &lp), Projection::Tanh).unwrap();
        assert_eq!(*rt.value(), Matrix::filled(3, 1, 1.0));

        // label projection [1, 0] against components [c, 0] and [c, 0] gives an equal row
        let mut lp = LevelParams::zeros(1, 2, 2, 2);
        lp.fl_w = Matrix::identity(2);
        lp.label_emb = m(&[&[1.0, 0.0]]);
        lp.components = m(&[&[0.7, 0.0], &[0.7, 0.0]]);
        let (_, rt) = label_component_association(&bind(&tape, &lp), Projection::Linear).unwrap();
        assert_eq!(rt.value().row(0), &[0.5, 0.5]);

        lp.components = m(&[&[3f64.ln(), 0.0], &[0.0, 0.0]]);
        let (r, rt) = label_component_association(&bind(&tape, &lp), Projection::Linear).unwrap();
        assert!((r.value().get(0, 0) - 3f64.ln()).abs() < 1e-15);
        assert!((rt.value().get(0, 0) - 0.75).abs() < 1e-15);
        assert!((rt.value().get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn attention_examples() {
        let tape = Tape::new();
        let s = tape.constant(Matrix::zeros(3, 2));
        let rt = tape.constant(m(&[&[0.2, 0.8], &[0.6, 0.4]]));
        let a = label_attention(rt, s, mask(&[true, true, true])).unwrap();
        assert!(a.value().as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let rt = tape.constant(m(&[&[1.0]]));
        let s = tape.constant(m(&[&[2.0], &[0.0]]));
        let a = label_attention(rt, s, mask(&[true, true])).unwrap();
        let e2 = 2f64.exp();
        assert!((a.value().get(0, 0) - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((a.value().get(0, 1) - 1.0 / (e2 + 1.0)).abs() < 1e-15);

        let a = label_attention(rt, s, mask(&[true, false])).unwrap();
        assert_eq!(a.value().get(0, 1), 0.0);
    }

    #[test]
    fn document_embedding_examples() {
        let tape = Tape::new();
        let mut lp = LevelParams::zeros(1, 1, 2, 2);
        lp.w = Matrix::identity(2);
        let bound = bind(&tape, &lp);
        let a = tape.constant(m(&[&[1.0]]));
        let words = tape.constant(m(&[&[0.5, -1.5]]));
        let d = label_document_embeddings(a, words, &bound).unwrap();
        assert_eq!(*d.value(), m(&[&[0.5, 0.0]]));

        let words = tape.constant(m(&[&[-0.5, -1.5]]));
        assert_eq!(*label_document_embeddings(a, words, &bound).unwrap().value(), Matrix::zeros(1, 2));

        let a = tape.constant(m(&[&[0.5, 0.5]]));
        let words = tape.constant(m(&[&[2.0, 0.0], &[0.0, 2.0]]));
        assert_eq!(*label_document_embeddings(a, words, &bound).unwrap().value(), m(&[&[1.0, 1.0]]));
    }

    #[test]
    fn mask_examples() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lp = bind(&tape, &LevelParams::init(3, 2, 2, 2, &mut rng));
        assert_eq!(*label_mask(None, &lp).unwrap().value(), Matrix::filled(3, 1, 1.0));

        let zero = bind(&tape, &LevelParams::zeros(2, 1, 2, 2));
        let v = tape.constant(m(&[&[0.3], &[-0.4]]));
        assert_eq!(*label_mask(Some(v), &zero).unwrap().value(), Matrix::filled(2, 1, 0.5));

        let mut lp = LevelParams::zeros(1, 1, 2, 2);
        lp.fm_w = Matrix::identity(2);
        lp.label_emb = m(&[&[3f64.ln(), 0.0]]);
        let v = tape.constant(m(&[&[1.0], &[0.0]]));
        let mv = label_mask(Some(v), &bind(&tape, &lp)).unwrap();
        assert!((mv.value().get(0, 0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masking_and_pooling_examples() {
        let tape = Tape::new();
        let d = tape.constant(m(&[&[2.0, 2.0], &[2.0, 2.0]]));
        let ones = tape.constant(Matrix::filled(2, 1, 1.0));
        assert_eq!(*apply_label_mask(d, ones).unwrap().value(), *d.value());
        let zeros = tape.constant(Matrix::zeros(2, 1));
        assert_eq!(*apply_label_mask(d, zeros).unwrap().value(), Matrix::zeros(2, 2));
        let half = tape.constant(m(&[&[1.0], &[0.5]]));
        assert_eq!(*apply_label_mask(d, half).unwrap().value(), m(&[&[2.0, 2.0], &[1.0, 1.0]]));

        let single = tape.constant(m(&[&[1.0, -2.0]]));
        let (vl, _) = pool_local_global(single, single).unwrap();
        assert_eq!(*vl.value(), m(&[&[1.0], &[-2.0]]));
        let dt = tape.constant(m(&[&[1.0, 3.0], &[3.0, 1.0]]));
        let (vl, vg) = pool_local_global(dt, dt).unwrap();
        assert_eq!(*vl.value(), m(&[&[2.0], &[2.0]]));
        assert_eq!(*vl.value(), *vg.value());
    }

    #[test]
    fn zero_parameters_collapse() {
        let tape = Tape::new();
        let mut lp = LevelParams::zeros(2, 3, 2, 2);
        lp.b = m(&[&[0.3, -0.2]]);
        let bound = bind(&tape, &lp);
        let words = tape.constant(m(&[&[1.0, 2.0], &[0.5, -1.0], &[0.0, 0.0]]));
        let out =
            level_forward(words, mask(&[true, true, false]), None, &bound, Projection::Tanh, AttentionVariant::Full)
                .unwrap();
        for r in 0..2 {
            assert_eq!(out.a.value().row(r), &[0.5, 0.5, 0.0]);
        }
        assert_eq!(*out.d.value(), m(&[&[0.3, 0.0], &[0.3, 0.0]]));
        assert_eq!(*out.v_local.value(), *out.v_global.value());

        let single = bind(&tape, &LevelParams::zeros(1, 1, 2, 2));
        let out = level_forward(
            words,
            mask(&[true, true, true]),
            None,
            &single,
            Projection::Tanh,
            AttentionVariant::NoComponent,
        )
        .unwrap();
        assert!(out.a.value().as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(out.r_tilde.is_none());
    }

    fn random_level(seed: u64) -> (LevelParams, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = LevelParams::init(3, 4, 3, 3, &mut rng);
        let words = uniform_small(5, 3, &mut rng).map(|v| v * 10.0);
        let v_prev = uniform_small(3, 1, &mut rng).map(|v| v * 10.0);
        (lp, words, v_prev)
    }

    #[test]
    fn component_order_is_anonymous() {
        let (lp, words, v_prev) = random_level(5);
        let mut permuted = lp.clone();
        let perm = [2, 0, 3, 1];
        for (dst, &src) in perm.iter().enumerate() {
            permuted.components.row_mut(dst).copy_from_slice(lp.components.row(src));
        }
        let run = |p: &LevelParams| {
            let tape = Tape::new();
            let out = level_forward(
                tape.constant(words.clone()),
                mask(&[true, true, true, true, false]),
                Some(tape.constant(v_prev.clone())),
                &p.map(|t| tape.constant(t.clone())),
                Projection::Tanh,
                AttentionVariant::Full,
            )
            .unwrap();
            out.trace()
        };
        let (a, b) = (run(&lp), run(&permuted));
        assert!(a.a.max_abs_diff(&b.a) < 1e-12);
        assert!(a.d_tilde.max_abs_diff(&b.d_tilde) < 1e-12);
        assert!(a.v_global.max_abs_diff(&b.v_global) < 1e-12);
    }

    #[test]
    fn level_forward_gradients_match_finite_differences() {
        for variant in [AttentionVariant::Full, AttentionVariant::NoComponent] {
            let (lp, words, v_prev) = random_level(11);
            let mask_bits = mask(&[true, true, false, true, false]);
            let loss = |p: &LevelParams, tape: &Tape| -> f64 {
                let out = level_forward(
                    tape.constant(words.clone()),
                    mask_bits.clone(),
                    Some(tape.constant(v_prev.clone())),
                    &p.map(|t| tape.constant(t.clone())),
                    Projection::Tanh,
                    variant,
                )
                .unwrap();
                scalar_loss(out).scalar().unwrap()
            };
            let tape = Tape::new();
            let bound = bind(&tape, &lp);
            let out = level_forward(
                tape.constant(words.clone()),
                mask_bits.clone(),
                Some(tape.constant(v_prev.clone())),
                &bound,
                Projection::Tanh,
                variant,
            )
            .unwrap();
            let grads = scalar_loss(out).backward().unwrap();
            for (i, name) in LEVEL_TENSOR_NAMES.iter().enumerate() {
                let analytic = grads.wrt(*bound.tensors()[i]);
                let num = numeric(lp.tensors()[i], 1e-5, |t| {
                    let mut p = lp.clone();
                    *p.tensors_mut()[i] = t.clone();
                    loss(&p, &Tape::new())
                });
                let err = max_rel_err(&analytic, &num);
                assert!(err < 1e-4, "{variant:?} {name}: {err}");
            }
        }
    }

    fn scalar_loss(out: LevelOutput<'_>) -> Var<'_> {
        let tape = out.d.tape();
        let probe = tape.constant(Matrix::filled(1, out.v_local.shape().0, 1.0));
        let a = probe.matmul(out.v_local).unwrap();
        let b = out.d_tilde.activate(Activation::Sigmoid).unwrap().sum();
        let c = out.v_global.scale(0.7).unwrap().sum();
        a.add(b).unwrap().add(c).unwrap()
    }
}
