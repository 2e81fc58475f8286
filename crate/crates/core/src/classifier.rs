//! Local and global heads, their losses, and the blended prediction.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{glorot, level_forward, AttentionVariant, LevelOutput, LevelParams, LevelTrace, Projection};
use crate::tensor::{Activation, Matrix, Tape, TensorError, Var};

/// Model variant: the full model or one of its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Attention without the component factorization.
    Nc,
    /// Optimizes the local loss only.
    Local,
    /// Optimizes the global loss only.
    Global,
}

impl Variant {
    pub fn attention(self) -> AttentionVariant {
        match self {
            Variant::Nc => AttentionVariant::NoComponent,
            _ => AttentionVariant::Full,
        }
    }

    pub fn uses_local_loss(self) -> bool {
        self != Variant::Global
    }

    pub fn uses_global_loss(self) -> bool {
        self != Variant::Local
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Nc => "nc",
            Variant::Local => "local",
            Variant::Global => "global",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "nc" => Ok(Variant::Nc),
            "local" => Ok(Variant::Local),
            "global" => Ok(Variant::Global),
            other => Err(format!("unknown variant `{other}` (expected full, nc, local or global)")),
        }
    }
}

/// Two-layer head over the concatenated per-level global embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalHeadParams<T = Matrix> {
    /// `(H·d) × d_hidden`
    pub w1: T,
    pub b1: T,
    /// `d_hidden × M`
    pub w2: T,
    pub b2: T,
}

pub const GLOBAL_TENSOR_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl<T> GlobalHeadParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GlobalHeadParams<U> {
        GlobalHeadParams { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }

    pub fn tensors(&self) -> [&T; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut T; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn from_tensors(t: [T; 4]) -> Self {
        let [w1, b1, w2, b2] = t;
        Self { w1, b1, w2, b2 }
    }
}

impl GlobalHeadParams<Matrix> {
    pub fn init(input: usize, hidden: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: glorot(input, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: glorot(hidden, outputs, rng),
            b2: Matrix::zeros(1, outputs),
        }
    }

    pub fn zeros(input: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, outputs),
            b2: Matrix::zeros(1, outputs),
        }
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTensors<T = Matrix> {
    /// `V × d` word vectors; row 0 is padding.
    pub embeddings: T,
    pub levels: Vec<LevelParams<T>>,
    pub global: GlobalHeadParams<T>,
}

impl<T> ModelTensors<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelTensors<U> {
        ModelTensors {
            embeddings: f(&self.embeddings),
            levels: self.levels.iter().map(|l| l.map(&mut f)).collect(),
            global: self.global.map(&mut f),
        }
    }

    /// Stable tensor names, e.g. `level2.fw_w`, matching [`Self::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["embeddings".to_string()];
        for h in 1..=self.levels.len() {
            names.extend(crate::attention::LEVEL_TENSOR_NAMES.iter().map(|n| format!("level{h}.{n}")));
        }
        names.extend(GLOBAL_TENSOR_NAMES.iter().map(|n| format!("global.{n}")));
        names
    }

    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.embeddings];
        for l in &self.levels {
            out.extend(l.tensors());
        }
        out.extend(self.global.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embeddings];
        for l in &mut self.levels {
            out.extend(l.tensors_mut());
        }
        out.extend(self.global.tensors_mut());
        out
    }

    /// Rebuilds from tensors listed in [`Self::tensors`] order.
    pub fn from_tensors(depth: usize, tensors: Vec<T>) -> Option<Self> {
        if tensors.len() != 1 + 10 * depth + 4 {
            return None;
        }
        let mut it = tensors.into_iter();
        let embeddings = it.next()?;
        let mut levels = Vec::with_capacity(depth);
        for _ in 0..depth {
            let chunk: Vec<T> = it.by_ref().take(10).collect();
            levels.push(LevelParams::from_tensors(chunk.try_into().ok()?));
        }
        let rest: Vec<T> = it.collect();
        Some(Self { embeddings, levels, global: GlobalHeadParams::from_tensors(rest.try_into().ok()?) })
    }
}

impl ModelTensors<Matrix> {
    /// Registers every tensor on `tape`. A frozen embedding table is
    /// recorded as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape, freeze_embeddings: bool) -> ModelTensors<Var<'t>> {
        let mut bound = self.map(|m| tape.param(m.clone()));
        if freeze_embeddings {
            bound.embeddings = tape.constant(self.embeddings.clone());
        }
        bound
    }

    /// Binds everything as constants, for inference.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> ModelTensors<Var<'t>> {
        self.map(|m| tape.constant(m.clone()))
    }
}

/// Knobs that shape a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub projection: Projection,
    pub variant: Variant,
    pub alpha: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { projection: Projection::Tanh, variant: Variant::Full, alpha: 0.5 }
    }
}

/// Per-document scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionScores {
    /// Per level, `q_h × 1`.
    pub local: Vec<Matrix>,
    /// `M × 1`.
    pub global: Matrix,
    /// `M × 1`, `α·local + (1 − α)·global`.
    pub blended: Matrix,
    /// `(H·d) × 1`.
    pub v_global_concat: Matrix,
}

impl PredictionScores {
    /// Local scores concatenated in global output order.
    pub fn local_concat(&self) -> Matrix {
        let data: Vec<f64> = self.local.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        Matrix::column(&data).expect("finite scores")
    }
}

/// `p_j = sigmoid(D̃[j,:] · label_emb[j,:])`, `q × 1`.
pub fn local_predict<'t>(d_tilde: Var<'t>, label_emb: Var<'t>) -> Result<Var<'t>, TensorError> {
    d_tilde.rowwise_dot(label_emb)?.activate(Activation::Sigmoid)
}

/// Summed cross-entropy over levels, averaged over the documents given.
/// `p[i][h]` and `z[i][h]` are document `i`, level `h`.
pub fn local_loss<'t>(p: &[Vec<Var<'t>>], z: &[Vec<Matrix>]) -> Result<Var<'t>, TensorError> {
    if p.len() != z.len() || p.is_empty() {
        return Err(TensorError::ShapeMismatch { op: "local_loss", left: (p.len(), 0), right: (z.len(), 0) });
    }
    let mut terms = Vec::new();
    for (pd, zd) in p.iter().zip(z) {
        if pd.len() != zd.len() {
            return Err(TensorError::ShapeMismatch { op: "local_loss", left: (pd.len(), 0), right: (zd.len(), 0) });
        }
        for (ph, zh) in pd.iter().zip(zd) {
            terms.push(ph.bce_sum(zh)?);
        }
    }
    mean_of(terms, p.len())
}

/// Cross-entropy of the global head, averaged over documents.
pub fn global_loss<'t>(p: &[Var<'t>], z: &[Matrix]) -> Result<Var<'t>, TensorError> {
    if p.len() != z.len() || p.is_empty() {
        return Err(TensorError::ShapeMismatch { op: "global_loss", left: (p.len(), 0), right: (z.len(), 0) });
    }
    let terms = p.iter().zip(z).map(|(pv, zv)| pv.bce_sum(zv)).collect::<Result<Vec<_>, _>>()?;
    mean_of(terms, p.len())
}

fn mean_of(terms: Vec<Var<'_>>, count: usize) -> Result<Var<'_>, TensorError> {
    let mut iter = terms.into_iter();
    let first = iter.next().ok_or(TensorError::EmptyAxis { op: "loss" })?;
    let total = iter.try_fold(first, |acc, t| acc.add(t))?;
    total.scale(1.0 / count as f64)
}

/// Unweighted sum of the two objectives.
pub fn total_loss<'t>(local: Var<'t>, global: Var<'t>) -> Result<Var<'t>, TensorError> {
    local.add(global)
}

/// Stacks per-level `d × 1` embeddings into `(H·d) × 1`.
pub fn global_embed<'t>(v_globals: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
    let first = v_globals.first().ok_or(TensorError::EmptyAxis { op: "global_embed" })?;
    let shape = first.shape();
    if shape.1 != 1 {
        return Err(TensorError::ShapeMismatch { op: "global_embed", left: (shape.0, 1), right: shape });
    }
    for v in v_globals {
        if v.shape() != shape {
            return Err(TensorError::ShapeMismatch { op: "global_embed", left: shape, right: v.shape() });
        }
    }
    Var::concat_rows(v_globals)
}

/// `sigmoid(relu(v_gᵀ·W1 + b1)·W2 + b2)` as an `M × 1` column.
pub fn global_predict<'t>(v_g: Var<'t>, gp: &GlobalHeadParams<Var<'t>>) -> Result<Var<'t>, TensorError> {
    let expected = gp.w1.shape().0;
    if v_g.shape() != (expected, 1) {
        return Err(TensorError::ShapeMismatch { op: "global_predict", left: (expected, 1), right: v_g.shape() });
    }
    let hidden = v_g.t().affine(gp.w1, gp.b1)?.activate(Activation::Relu)?;
    Ok(hidden.affine(gp.w2, gp.b2)?.activate(Activation::Sigmoid)?.t())
}

/// `α·concat(local) + (1 − α)·global`.
pub fn combine_predictions(local: &[Matrix], global: &Matrix, alpha: f64) -> Result<Matrix, TensorError> {
    let local: Vec<f64> = local.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    if local.len() != global.len() {
        return Err(TensorError::ShapeMismatch {
            op: "combine_predictions",
            left: (local.len(), 1),
            right: global.shape(),
        });
    }
    let data: Vec<f64> = local.iter().zip(global.as_slice()).map(|(l, g)| alpha * l + (1.0 - alpha) * g).collect();
    Matrix::column(&data)
}

/// Tape handles for one document's forward pass.
pub struct DocumentForward<'t> {
    pub levels: Vec<LevelOutput<'t>>,
    /// Per level, `q_h × 1`.
    pub local: Vec<Var<'t>>,
    /// `M × 1`.
    pub global: Var<'t>,
    pub v_g: Var<'t>,
}

impl<'t> DocumentForward<'t> {
    pub fn scores(&self, alpha: f64) -> Result<PredictionScores, TensorError> {
        let local: Vec<Matrix> = self.local.iter().map(|v| v.value().clone()).collect();
        let global = self.global.value().clone();
        let blended = combine_predictions(&local, &global, alpha)?;
        Ok(PredictionScores { local, global, blended, v_global_concat: self.v_g.value().clone() })
    }

    pub fn traces(&self) -> Vec<LevelTrace> {
        self.levels.iter().map(LevelOutput::trace).collect()
    }
}

/// Runs every level in order, threading the local embedding forward, then
/// both heads. `words` is the `N × d` base embedding matrix.
pub fn forward_words<'t>(
    params: &ModelTensors<Var<'t>>,
    words: Var<'t>,
    mask: Rc<[bool]>,
    opts: &ForwardOptions,
) -> Result<DocumentForward<'t>, TensorError> {
    let mut levels = Vec::with_capacity(params.levels.len());
    let mut local = Vec::with_capacity(params.levels.len());
    let mut v_prev = None;
    for lp in &params.levels {
        let out = level_forward(words, mask.clone(), v_prev, lp, opts.projection, opts.variant.attention())?;
        local.push(local_predict(out.d_tilde, lp.label_emb)?);
        v_prev = Some(out.v_local);
        levels.push(out);
    }
    let v_globals: Vec<Var<'t>> = levels.iter().map(|l| l.v_global).collect();
    let v_g = global_embed(&v_globals)?;
    let global = global_predict(v_g, &params.global)?;
    Ok(DocumentForward { levels, local, global, v_g })
}

/// Looks up `token_ids` in the embedding table, then [`forward_words`].
pub fn forward_tokens<'t>(
    params: &ModelTensors<Var<'t>>,
    token_ids: &[usize],
    mask: &[bool],
    opts: &ForwardOptions,
) -> Result<DocumentForward<'t>, TensorError> {
    let tape = params.embeddings.tape();
    let words = tape.gather_rows(params.embeddings, token_ids)?;
    forward_words(params, words, Rc::from(mask), opts)
}

/// Inference on stored parameters for one encoded document.
pub fn forward_document(
    params: &ModelTensors,
    token_ids: &[usize],
    mask: &[bool],
    opts: &ForwardOptions,
) -> Result<(PredictionScores, Vec<LevelTrace>), TensorError> {
    let tape = Tape::new();
    let bound = params.bind_constant(&tape);
    let fwd = forward_tokens(&bound, token_ids, mask, opts)?;
    Ok((fwd.scores(opts.alpha)?, fwd.traces()))
}

/// Inference from an explicit `N × d` word matrix instead of token ids.
pub fn forward_embedded(
    params: &ModelTensors,
    words: &Matrix,
    mask: &[bool],
    opts: &ForwardOptions,
) -> Result<(PredictionScores, Vec<LevelTrace>), TensorError> {
    let tape = Tape::new();
    let bound = params.bind_constant(&tape);
    let fwd = forward_words(&bound, tape.constant(words.clone()), Rc::from(mask), opts)?;
    Ok((fwd.scores(opts.alpha)?, fwd.traces()))
}

/// Batch objective for `variant`: local loss, global loss, or their sum,
/// each averaged over the documents.
pub fn batch_objective<'t>(
    docs: &[DocumentForward<'t>],
    local_targets: &[Vec<Matrix>],
    global_targets: &[Matrix],
    variant: Variant,
) -> Result<Var<'t>, TensorError> {
    let local = || {
        let p: Vec<Vec<Var<'t>>> = docs.iter().map(|d| d.local.clone()).collect();
        local_loss(&p, local_targets)
    };
    let global = || {
        let p: Vec<Var<'t>> = docs.iter().map(|d| d.global).collect();
        global_loss(&p, global_targets)
    };
    match (variant.uses_local_loss(), variant.uses_global_loss()) {
        (true, true) => total_loss(local()?, global()?),
        (true, false) => local(),
        (false, true) => global(),
        (false, false) => unreachable!("every variant optimizes something"),
    }
}
