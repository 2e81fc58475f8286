//! Documents, vocabulary, word vectors, and padded batches.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hierarchy::{HierarchyError, LabelHierarchy, LabelSet};
use crate::tensor::Matrix;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Default maximum sequence length.
pub const DEFAULT_MAX_LEN: usize = 256;

/// Half-width of the uniform range for randomly initialized word vectors.
pub const EMBED_INIT_RANGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}:{line}: unknown label `{label}`")]
    UnknownLabel { path: String, line: usize, label: String },
    #[error("{path}:{line}: duplicate document id `{id}`")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("{path}:{line}: expected {expected} values, found {found}")]
    DimMismatch { path: String, line: usize, expected: usize, found: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    /// Ancestor-closed.
    pub labels: LabelSet,
}

impl Document {
    /// Builds a document, applying ancestor closure to `labels`.
    pub fn new<S: AsRef<str>>(
        id: impl Into<String>,
        tokens: Vec<String>,
        labels: impl IntoIterator<Item = S>,
        hier: &LabelHierarchy,
    ) -> Result<Self, HierarchyError> {
        Ok(Self { id: id.into(), tokens, labels: hier.ancestor_closure(labels)? })
    }
}

#[derive(Deserialize)]
struct Record {
    id: String,
    tokens: Vec<String>,
    #[serde(default)]
    labels: Vec<String>,
}

/// Counters gathered while loading a corpus file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub documents: usize,
    /// Documents whose label set was extended by ancestor closure.
    pub closure_corrected: usize,
    /// Labels added by closure, summed over documents.
    pub labels_added: usize,
}

/// Parses line-delimited JSON records. Blank lines are skipped.
pub fn parse_corpus(
    text: &str,
    source: &str,
    hier: &LabelHierarchy,
) -> Result<(Vec<Document>, LoadStats), CorpusError> {
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    let mut stats = LoadStats::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: source.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.tokens.is_empty() {
            return Err(CorpusError::Parse {
                path: source.to_string(),
                line: line_no,
                message: format!("document `{}` has no tokens", rec.id),
            });
        }
        if !ids.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId { path: source.to_string(), line: line_no, id: rec.id });
        }
        let given: HashSet<&String> = rec.labels.iter().collect();
        let labels = hier.ancestor_closure(&rec.labels).map_err(|e| match e {
            HierarchyError::UnknownLabel(label) => {
                CorpusError::UnknownLabel { path: source.to_string(), line: line_no, label }
            }
            other => CorpusError::Parse { path: source.to_string(), line: line_no, message: other.to_string() },
        })?;
        if labels.len() > given.len() {
            stats.closure_corrected += 1;
            stats.labels_added += labels.len() - given.len();
        }
        docs.push(Document { id: rec.id, tokens: rec.tokens, labels });
    }
    stats.documents = docs.len();
    Ok((docs, stats))
}

pub fn load_corpus_with_stats(
    path: impl AsRef<Path>,
    hier: &LabelHierarchy,
) -> Result<(Vec<Document>, LoadStats), CorpusError> {
    let path = path.as_ref();
    let text = read(path)?;
    parse_corpus(&text, &path.display().to_string(), hier)
}

pub fn load_corpus(path: impl AsRef<Path>, hier: &LabelHierarchy) -> Result<Vec<Document>, CorpusError> {
    load_corpus_with_stats(path, hier).map(|(docs, _)| docs)
}

/// Serializes documents in the corpus file format.
pub fn write_corpus(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        let rec = serde_json::json!({ "id": d.id, "tokens": d.tokens, "labels": d.labels });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|e| CorpusError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Token to index map with `PAD = 0` and `UNK = 1` reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times, most frequent first,
    /// ties broken lexicographically.
    pub fn build(docs: &[Document], min_count: usize) -> Result<Self, CorpusError> {
        if docs.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in docs {
            for t in &d.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().filter(|(t, _)| *t != PAD_TOKEN && *t != UNK_TOKEN).map(|(t, _)| t.to_string()));
        Ok(Self::from(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of `token`, falling back to `UNK`.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Word vectors, one row per vocabulary entry; row `PAD` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Matrix,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Uniform `[-EMBED_INIT_RANGE, EMBED_INIT_RANGE]` rows, zero `PAD` row.
    pub fn random(vocab: &Vocabulary, dim: usize, rng: &mut impl Rng) -> Self {
        let mut vectors = Matrix::zeros(vocab.len(), dim);
        for r in 1..vocab.len() {
            for v in vectors.row_mut(r) {
                *v = rng.gen_range(-EMBED_INIT_RANGE..=EMBED_INIT_RANGE);
            }
        }
        Self { vectors }
    }
}

/// Reads word vectors in text format (`token v1 .. vd` per line, optional
/// `count dim` header). Vocabulary tokens missing from the file, and `UNK`,
/// get uniform `[-EMBED_INIT_RANGE, EMBED_INIT_RANGE]` rows drawn from `rng`.
pub fn parse_embeddings(
    text: &str,
    source: &str,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingTable, CorpusError> {
    let mut found: HashMap<usize, Vec<f64>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            let header_dim: usize = fields[1].parse().unwrap();
            if header_dim != dim {
                return Err(CorpusError::DimMismatch {
                    path: source.into(),
                    line: line_no,
                    expected: dim,
                    found: header_dim,
                });
            }
            continue;
        }
        let values = &fields[1..];
        if values.len() != dim {
            return Err(CorpusError::DimMismatch {
                path: source.into(),
                line: line_no,
                expected: dim,
                found: values.len(),
            });
        }
        let parsed = values
            .iter()
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| CorpusError::Parse {
                path: source.into(),
                line: line_no,
                message: "vector component is not a finite number".into(),
            })?;
        if let Some(idx) = vocab.get(fields[0]) {
            if idx != PAD {
                found.entry(idx).or_insert(parsed);
            }
        }
    }
    let mut table = EmbeddingTable::random(vocab, dim, rng);
    for (idx, v) in found {
        table.vectors.row_mut(idx).copy_from_slice(&v);
    }
    Ok(table)
}

pub fn load_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingTable, CorpusError> {
    let path = path.as_ref();
    parse_embeddings(&read(path)?, &path.display().to_string(), vocab, dim, rng)
}

/// Index-encoded, padded documents plus per-level targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B × N` token indices.
    pub token_ids: Vec<Vec<usize>>,
    /// `B × N`, true on real tokens.
    pub mask: Vec<Vec<bool>>,
    /// Per level, a `B × q_h` 0/1 grid in `labels_at_level` order.
    pub targets: Vec<Matrix>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Targets of one document at one level, as a `q_h × 1` column.
    pub fn level_target(&self, row: usize, level: usize) -> Matrix {
        let t = &self.targets[level - 1];
        Matrix::column(t.row(row)).expect("targets are finite")
    }

    /// All targets of one document in global output order, `M × 1`.
    pub fn global_target(&self, row: usize) -> Matrix {
        let data: Vec<f64> = self.targets.iter().flat_map(|t| t.row(row).iter().copied()).collect();
        Matrix::column(&data).expect("targets are finite")
    }
}

/// Truncates each document to its first `max_len` tokens and right-pads the
/// batch to its longest member.
pub fn encode_batch(docs: &[&Document], vocab: &Vocabulary, hier: &LabelHierarchy, max_len: usize) -> Batch {
    assert!(max_len >= 1, "max_len must be positive");
    let width = docs.iter().map(|d| d.tokens.len().min(max_len)).max().unwrap_or(0);
    let mut token_ids = Vec::with_capacity(docs.len());
    let mut mask = Vec::with_capacity(docs.len());
    for d in docs {
        let mut ids: Vec<usize> = d.tokens.iter().take(max_len).map(|t| vocab.lookup(t)).collect();
        let mut m = vec![true; ids.len()];
        ids.resize(width, PAD);
        m.resize(width, false);
        token_ids.push(ids);
        mask.push(m);
    }
    let targets = (1..=hier.depth())
        .map(|h| {
            let labels = hier.labels_at_level(h).expect("level in range");
            let mut grid = Matrix::zeros(docs.len(), labels.len());
            for (i, d) in docs.iter().enumerate() {
                for (j, l) in labels.iter().enumerate() {
                    if d.labels.contains(*l) {
                        grid.set(i, j, 1.0);
                    }
                }
            }
            grid
        })
        .collect();
    Batch { token_ids, mask, targets }
}
