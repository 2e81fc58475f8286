//! Parameter initialization, optimizers, the epoch loop and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{LevelParams, LevelTrace, Projection};
use crate::classifier::{
    batch_objective, forward_document, forward_tokens, ForwardOptions, GlobalHeadParams, ModelTensors,
    PredictionScores, Variant,
};
use crate::corpus::{encode_batch, Document, EmbeddingTable, Vocabulary, DEFAULT_MAX_LEN, PAD};
use crate::hierarchy::LabelHierarchy;
use crate::metrics::{au_prc_of, report_from_scores, scored_set, EvaluationReport, MetricsError};
use crate::tensor::{Matrix, Tape, TensorError};

pub const CHECKPOINT_VERSION: u64 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("unsupported checkpoint format version {found} (expected {supported})")]
    Version { found: u64, supported: u64 },
    #[error("checkpoint was built for hierarchy {found}, not {expected}")]
    Fingerprint { expected: String, found: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(format!("unknown optimizer '{other}' (expected adam or sgd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Documents are truncated to this many tokens.
    pub max_len: usize,
    /// Word embedding width `d`.
    pub dim: usize,
    /// Component width `d_c`; defaults to `dim`.
    pub component_dim: Option<usize>,
    /// Components per level; a single value applies to every level.
    pub components: Vec<usize>,
    /// Hidden width of the global head; defaults to `dim`.
    pub hidden: Option<usize>,
    pub alpha: f64,
    pub variant: Variant,
    pub projection: Projection,
    pub freeze_embeddings: bool,
    /// Tokens seen fewer times map to the unknown row.
    pub min_count: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            max_len: DEFAULT_MAX_LEN,
            dim: 32,
            component_dim: None,
            components: vec![64],
            hidden: None,
            alpha: 0.5,
            variant: Variant::Full,
            projection: Projection::Tanh,
            freeze_embeddings: false,
            min_count: 1,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn component_dim(&self) -> usize {
        self.component_dim.unwrap_or(self.dim)
    }

    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or(self.dim)
    }

    /// Components for each of `depth` levels.
    pub fn components_per_level(&self, depth: usize) -> Result<Vec<usize>, TrainError> {
        match self.components.as_slice() {
            [m] => Ok(vec![*m; depth]),
            ms if ms.len() == depth => Ok(ms.to_vec()),
            ms => {
                Err(TrainError::Config(format!("components lists {} levels but the hierarchy has {depth}", ms.len())))
            }
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("max_len", self.max_len),
            ("dim", self.dim),
            ("component_dim", self.component_dim()),
            ("hidden", self.hidden()),
            ("min_count", self.min_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.components.is_empty() || self.components.contains(&0) {
            return Err(TrainError::Config("components must be a non-empty list of positive counts".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrainError::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(TrainError::Config(format!("clip_norm must be non-negative, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions { projection: self.projection, variant: self.variant, alpha: self.alpha }
    }
}

/// A trained or freshly initialized model with everything needed to score
/// new text.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: ModelTensors,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    /// Fingerprint of the hierarchy the model was built for.
    pub fingerprint: String,
    pub level_sizes: Vec<usize>,
}

impl ModelParams {
    /// Token ids of the first `max_len` tokens, with an all-true mask.
    pub fn encode(&self, tokens: &[String]) -> (Vec<usize>, Vec<bool>) {
        let ids: Vec<usize> = tokens.iter().take(self.config.max_len).map(|t| self.vocab.lookup(t)).collect();
        let mask = vec![true; ids.len()];
        (ids, mask)
    }

    /// Scores and attention traces for one document at blend weight `alpha`.
    pub fn predict(&self, tokens: &[String], alpha: f64) -> Result<(PredictionScores, Vec<LevelTrace>), TensorError> {
        let (ids, mask) = self.encode(tokens);
        let opts = ForwardOptions { alpha, ..self.config.forward_options() };
        forward_document(&self.tensors, &ids, &mask, &opts)
    }

    pub fn check_hierarchy(&self, hier: &LabelHierarchy) -> Result<(), TrainError> {
        let expected = hier.fingerprint();
        if expected != self.fingerprint {
            return Err(TrainError::Fingerprint { expected, found: self.fingerprint.clone() });
        }
        Ok(())
    }
}

/// All-zero tensors shaped for `cfg`, the level sizes and a vocabulary size.
pub fn zero_tensors(cfg: &TrainConfig, level_sizes: &[usize], vocab_len: usize) -> Result<ModelTensors, TrainError> {
    let (d, dc) = (cfg.dim, cfg.component_dim());
    let comps = cfg.components_per_level(level_sizes.len())?;
    Ok(ModelTensors {
        embeddings: Matrix::zeros(vocab_len, d),
        levels: level_sizes.iter().zip(&comps).map(|(&q, &m)| LevelParams::zeros(q, m, d, dc)).collect(),
        global: GlobalHeadParams::zeros(level_sizes.len() * d, cfg.hidden(), level_sizes.iter().sum()),
    })
}

/// Seeded initialization. Without `embeddings`, word vectors are drawn
/// uniformly within [`crate::corpus::EMBED_INIT_RANGE`].
pub fn init_params(
    cfg: &TrainConfig,
    hier: &LabelHierarchy,
    vocab: &Vocabulary,
    embeddings: Option<&EmbeddingTable>,
) -> Result<ModelParams, TrainError> {
    cfg.validate()?;
    let level_sizes = hier.level_sizes();
    let comps = cfg.components_per_level(level_sizes.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = match embeddings {
        Some(t) if t.dim() != cfg.dim => {
            return Err(TrainError::Config(format!("embedding width {} differs from dim {}", t.dim(), cfg.dim)));
        }
        Some(t) if t.vectors.rows() != vocab.len() => {
            return Err(TrainError::Config(format!(
                "embedding table has {} rows for a vocabulary of {}",
                t.vectors.rows(),
                vocab.len()
            )));
        }
        Some(t) => t.vectors.clone(),
        None => EmbeddingTable::random(vocab, cfg.dim, &mut rng).vectors,
    };
    let (d, dc) = (cfg.dim, cfg.component_dim());
    let levels = level_sizes.iter().zip(&comps).map(|(&q, &m)| LevelParams::init(q, m, d, dc, &mut rng)).collect();
    let global = GlobalHeadParams::init(level_sizes.len() * d, cfg.hidden(), level_sizes.iter().sum(), &mut rng);
    Ok(ModelParams {
        tensors: ModelTensors { embeddings: table, levels, global },
        config: cfg.clone(),
        vocab: vocab.clone(),
        fingerprint: hier.fingerprint(),
        level_sizes,
    })
}

/// Per-tensor optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam { step: u64, first: ModelTensors, second: ModelTensors },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, shape_of: &ModelTensors) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => {
                let zeros = shape_of.map(|m| Matrix::zeros(m.rows(), m.cols()));
                Self::Adam { step: 0, first: zeros.clone(), second: zeros }
            }
        }
    }
}

/// One update of every tensor. The `PAD` embedding row never moves, and a
/// frozen embedding table is left untouched.
pub fn optimizer_step(
    params: &mut ModelTensors,
    grads: &ModelTensors,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<(), TensorError> {
    let lr = cfg.learning_rate;
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    for (p, g) in params.iter().zip(&grads) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch { op: "optimizer_step", left: p.shape(), right: g.shape() });
        }
    }
    let frozen_rows = |index: usize, cols: usize| -> std::ops::Range<usize> {
        match (index, cfg.freeze_embeddings) {
            (0, true) => 0..usize::MAX,
            (0, false) => PAD * cols..(PAD + 1) * cols,
            _ => 0..0,
        }
    };
    match state {
        OptimizerState::Sgd => {
            for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
                let skip = frozen_rows(i, p.cols());
                for (k, (w, dw)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                    if !skip.contains(&k) {
                        *w -= lr * dw;
                    }
                }
            }
        }
        OptimizerState::Adam { step, first, second } => {
            *step += 1;
            let t = *step as i32;
            let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
            let (ms, vs) = (first.tensors_mut(), second.tensors_mut());
            for (i, (((p, g), m), v)) in params.iter_mut().zip(&grads).zip(ms).zip(vs).enumerate() {
                let skip = frozen_rows(i, p.cols());
                let cells = p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice());
                for (k, (((w, &dw), m), v)) in cells.enumerate() {
                    if skip.contains(&k) {
                        continue;
                    }
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * dw;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * dw * dw;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut ModelTensors, max_norm: f64) -> f64 {
    let norm = grads.tensors().iter().flat_map(|g| g.as_slice()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.tensors_mut() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Mean training objective of `docs` under `params.config.variant`.
pub fn batch_loss(params: &ModelParams, docs: &[&Document], hier: &LabelHierarchy) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let bound = params.tensors.bind_constant(&tape);
    Ok(objective_on(&bound, params, docs, hier)?.scalar()?)
}

/// Mean objective and its gradient with respect to every tensor. Frozen
/// embeddings get a zero gradient.
pub fn loss_and_gradients(
    params: &ModelParams,
    docs: &[&Document],
    hier: &LabelHierarchy,
) -> Result<(f64, ModelTensors), TrainError> {
    let tape = Tape::new();
    let bound = params.tensors.bind(&tape, params.config.freeze_embeddings);
    let loss = objective_on(&bound, params, docs, hier)?;
    let value = loss.scalar()?;
    let grads = loss.backward()?;
    Ok((value, bound.map(|v| grads.wrt(*v))))
}

fn objective_on<'t>(
    bound: &ModelTensors<crate::tensor::Var<'t>>,
    params: &ModelParams,
    docs: &[&Document],
    hier: &LabelHierarchy,
) -> Result<crate::tensor::Var<'t>, TrainError> {
    if docs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let batch = encode_batch(docs, &params.vocab, hier, params.config.max_len);
    let opts = params.config.forward_options();
    let mut forwards = Vec::with_capacity(docs.len());
    let mut local_targets = Vec::with_capacity(docs.len());
    let mut global_targets = Vec::with_capacity(docs.len());
    for row in 0..batch.len() {
        forwards.push(forward_tokens(bound, &batch.token_ids[row], &batch.mask[row], &opts)?);
        local_targets.push((1..=hier.depth()).map(|h| batch.level_target(row, h)).collect());
        global_targets.push(batch.global_target(row));
    }
    Ok(batch_objective(&forwards, &local_targets, &global_targets, opts.variant)?)
}

/// Scores every document at blend weight `alpha`.
pub fn score_documents(
    params: &ModelParams,
    docs: &[Document],
    alpha: f64,
) -> Result<Vec<PredictionScores>, TensorError> {
    docs.iter().map(|d| params.predict(&d.tokens, alpha).map(|(s, _)| s)).collect()
}

/// `M × 1` 0/1 targets of each document in global output order.
pub fn document_targets(docs: &[Document], hier: &LabelHierarchy) -> Vec<Matrix> {
    docs.iter()
        .map(|d| {
            let z: Vec<f64> = hier.labels().iter().map(|l| if d.labels.contains(l) { 1.0 } else { 0.0 }).collect();
            Matrix::column(&z).expect("targets are finite")
        })
        .collect()
}

/// Full evaluation report on `docs` at blend weight `alpha`.
pub fn evaluate(
    params: &ModelParams,
    docs: &[Document],
    hier: &LabelHierarchy,
    alpha: f64,
) -> Result<EvaluationReport, TrainError> {
    params.check_hierarchy(hier)?;
    if docs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let scores = score_documents(params, docs, alpha)?;
    Ok(report_from_scores(&scores, &document_targets(docs, hier), &params.level_sizes, alpha)?)
}

/// Overall blended area on `docs`, the quantity early stopping watches.
pub fn blended_au_prc(params: &ModelParams, docs: &[Document], hier: &LabelHierarchy) -> Result<f64, TrainError> {
    let scores = score_documents(params, docs, params.config.alpha)?;
    let cols: Vec<&Matrix> = scores.iter().map(|s| &s.blended).collect();
    let set = scored_set(&cols, &document_targets(docs, hier), &params.level_sizes)?;
    Ok(au_prc_of(&set)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-document training objective.
    pub loss: f64,
    /// Overall blended area on the validation split.
    pub metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
}

/// Trains from a seeded initialization and returns the parameters of the
/// best validation epoch. An empty `valid` split falls back to `train`.
pub fn train(
    cfg: &TrainConfig,
    train_docs: &[Document],
    valid_docs: &[Document],
    hier: &LabelHierarchy,
    vocab: &Vocabulary,
    embeddings: Option<&EmbeddingTable>,
) -> Result<(ModelParams, History), TrainError> {
    if train_docs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = init_params(cfg, hier, vocab, embeddings)?;
    let valid = if valid_docs.is_empty() { train_docs } else { valid_docs };
    let mut state = OptimizerState::new(cfg.optimizer, &params.tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_docs.len()).collect();

    let mut history = History { best_metric: f64::NEG_INFINITY, ..History::default() };
    let mut best = params.clone();
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let docs: Vec<&Document> = chunk.iter().map(|&i| &train_docs[i]).collect();
            let (loss, mut grads) = match loss_and_gradients(&params, &docs, hier) {
                Err(TrainError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(TrainError::NonFiniteLoss { epoch, batch: batch + 1, value: f64::NAN });
                }
                other => other?,
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch + 1, value: loss });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            optimizer_step(&mut params.tensors, &grads, &mut state, cfg)?;
            loss_total += loss * docs.len() as f64;
        }
        let metric = blended_au_prc(&params, valid, hier)?;
        history.epochs.push(EpochRecord { epoch, loss: loss_total / train_docs.len() as f64, metric });
        if metric > history.best_metric {
            history.best_metric = metric;
            history.best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            history.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    Ok((best, history))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u64,
    config: TrainConfig,
    fingerprint: String,
    level_sizes: Vec<usize>,
    vocab: Vocabulary,
    tensors: Vec<NamedTensor>,
}

/// Checkpoint as one JSON document with round-trip-exact floats.
pub fn checkpoint_to_string(params: &ModelParams) -> String {
    let tensors = params
        .tensors
        .names()
        .into_iter()
        .zip(params.tensors.tensors())
        .map(|(name, m)| NamedTensor { name, rows: m.rows(), cols: m.cols(), values: m.as_slice().to_vec() })
        .collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        fingerprint: params.fingerprint.clone(),
        level_sizes: params.level_sizes.clone(),
        vocab: params.vocab.clone(),
        tensors,
    };
    let mut text = serde_json::to_string(&file).expect("checkpoint serializes");
    text.push('\n');
    text
}

/// Parses a checkpoint and checks it against `hier`.
pub fn checkpoint_from_str(text: &str, source: &str, hier: &LabelHierarchy) -> Result<ModelParams, TrainError> {
    let parse_err = |message: String| TrainError::Parse { path: source.to_string(), message };
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
    match version {
        Some(CHECKPOINT_VERSION) => {}
        Some(found) => return Err(TrainError::Version { found, supported: CHECKPOINT_VERSION }),
        None => return Err(parse_err("missing format_version".into())),
    }
    let file: CheckpointFile = serde_json::from_value(raw).map_err(|e| parse_err(e.to_string()))?;
    let expected = hier.fingerprint();
    if file.fingerprint != expected {
        return Err(TrainError::Fingerprint { expected, found: file.fingerprint });
    }
    file.config.validate()?;
    let template = zero_tensors(&file.config, &file.level_sizes, file.vocab.len())?;
    let names = template.names();
    if file.tensors.len() != names.len() {
        return Err(parse_err(format!("expected {} tensors, found {}", names.len(), file.tensors.len())));
    }
    let mut matrices = Vec::with_capacity(names.len());
    for ((t, name), shape) in file.tensors.into_iter().zip(&names).zip(template.tensors().iter().map(|m| m.shape())) {
        if &t.name != name || (t.rows, t.cols) != shape {
            return Err(parse_err(format!(
                "tensor '{}' {}x{} where '{name}' {}x{} was expected",
                t.name, t.rows, t.cols, shape.0, shape.1
            )));
        }
        matrices.push(Matrix::new(t.rows, t.cols, t.values).map_err(|e| parse_err(format!("tensor '{name}': {e}")))?);
    }
    let tensors = ModelTensors::from_tensors(file.level_sizes.len(), matrices).expect("tensor count checked");
    Ok(ModelParams {
        tensors,
        config: file.config,
        vocab: file.vocab,
        fingerprint: file.fingerprint,
        level_sizes: file.level_sizes,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_string(params)).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: impl AsRef<Path>, hier: &LabelHierarchy) -> Result<ModelParams, TrainError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    checkpoint_from_str(&text, &path.display().to_string(), hier)
}
