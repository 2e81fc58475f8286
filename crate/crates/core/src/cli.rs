//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Projection;
use crate::classifier::Variant;
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{load_corpus_with_stats, load_embeddings, write_corpus, CorpusError, Document, Vocabulary};
use crate::explain::{explain_document, render_heatmap};
use crate::hierarchy::{HierarchyError, LabelHierarchy};
use crate::metrics::{scored_set, MetricsError, ScoredSet};
use crate::synthetic::{generate, tree_with_level_sizes, SyntheticSpec};
use crate::tensor::{Matrix, TensorError};
use crate::training::{
    document_targets, evaluate, load_checkpoint, save_checkpoint, train, ModelParams, OptimizerKind, TrainError,
};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "lahcn", version, about = "Hierarchical multi-label text classification with label-based attention")]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand. Each overrides the matching config
/// file setting.
#[derive(Debug, Default, Args)]
pub struct SharedArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Local/global blend weight in [0, 1].
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// full, nc, local or global.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Omit creation timestamps so outputs are byte-reproducible.
    #[arg(long, global = true)]
    pub no_timestamp: bool,

    #[arg(long, global = true)]
    pub hierarchy: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train: Option<PathBuf>,
    #[arg(long, global = true)]
    pub valid: Option<PathBuf>,
    #[arg(long, global = true)]
    pub test: Option<PathBuf>,
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// adam or sgd.
    #[arg(long, global = true)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub max_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub component_dim: Option<usize>,
    /// One count for every level, or a comma-separated count per level.
    #[arg(long, global = true, value_delimiter = ',')]
    pub components: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// tanh or linear.
    #[arg(long, global = true, value_parser = parse_projection)]
    pub projection: Option<Projection>,
    #[arg(long, global = true)]
    pub freeze_embeddings: Option<bool>,
    #[arg(long, global = true)]
    pub min_count: Option<usize>,
    #[arg(long, global = true)]
    pub clip_norm: Option<f64>,
}

fn parse_projection(s: &str) -> Result<Projection, String> {
    match s {
        "tanh" => Ok(Projection::Tanh),
        "linear" => Ok(Projection::Linear),
        other => Err(format!("unknown projection `{other}` (expected tanh or linear)")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the hierarchy and corpora and report their shape.
    Validate,
    /// Train a model and write its checkpoint and history.
    Train,
    /// Score the test split and write a metrics report.
    Evaluate {
        /// Report path; defaults to report.json in the output directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write blended scores for every label of every document.
    Predict {
        /// Corpus to score; defaults to the test split.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to predictions.jsonl in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Export attention explanations and heatmap pages.
    Explain {
        /// Corpus holding the documents; defaults to the test split.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma-separated document ids; all documents when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Only labels whose blended score exceeds this are explained.
        #[arg(long, default_value_t = 0.1)]
        min_score: f64,
    },
    /// Write a synthetic corpus, or a hierarchy with given level sizes.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        /// Comma-separated labels per level; writes only hierarchy.tsv.
        #[arg(long, value_delimiter = ',')]
        level_sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 60)]
        documents: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(EXIT_CONFIG, e.to_string())
    }
}

impl From<HierarchyError> for CliError {
    fn from(e: HierarchyError) -> Self {
        let code = match e {
            HierarchyError::Parse { .. } | HierarchyError::Io { .. } => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let code = match e {
            CorpusError::Parse { .. } | CorpusError::Io { .. } | CorpusError::DimMismatch { .. } => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::new(EXIT_NUMERIC, e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        let code = if matches!(e, MetricsError::NonFiniteScore { .. }) { EXIT_NUMERIC } else { EXIT_DATA };
        Self::new(code, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Tensor(t) => t.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::NonFiniteLoss { .. } => Self::new(EXIT_NUMERIC, e.to_string()),
            TrainError::Config(_) | TrainError::Version { .. } | TrainError::Parse { .. } | TrainError::Io(_) => {
                Self::new(EXIT_CONFIG, e.to_string())
            }
            TrainError::EmptyDataset | TrainError::Fingerprint { .. } => Self::new(EXIT_DATA, e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_CONFIG, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// The merged configuration: file first, flags on top.
pub fn resolve_config(shared: &SharedArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &shared.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = &shared.$flag { cfg.$($field).+ = v.clone().into(); })*
        };
    }
    set!(
        hierarchy => hierarchy, train => train, valid => valid, test => test, embeddings => embeddings,
        checkpoint => checkpoint, output_dir => output_dir,
        seed => training.seed, alpha => training.alpha, variant => training.variant,
        learning_rate => training.learning_rate, optimizer => training.optimizer, batch_size => training.batch_size,
        max_epochs => training.max_epochs, patience => training.patience, max_len => training.max_len,
        dim => training.dim, component_dim => training.component_dim, components => training.components,
        hidden => training.hidden, projection => training.projection, freeze_embeddings => training.freeze_embeddings,
        min_count => training.min_count, clip_norm => training.clip_norm,
    );
    cfg.training.validate()?;
    Ok(cfg)
}

fn timestamp(shared: &SharedArgs) -> Option<u64> {
    (!shared.no_timestamp).then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

/// Rounds every non-integer number to 6 decimals.
fn round_json(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = (n.as_f64().expect("f64") * 1e6).round() / 1e6;
            serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    /// Every label in global output order with its blended score.
    pub scores: Vec<LabelScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub score: f64,
}

/// Parses a predictions file.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Pools prediction records against the documents' labels, matched by id.
pub fn pool_predictions(
    records: &[PredictionRecord],
    docs: &[Document],
    hier: &LabelHierarchy,
) -> Result<ScoredSet, CliError> {
    let targets = document_targets(docs, hier);
    let by_id: std::collections::HashMap<&str, usize> =
        docs.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    let mut cols = Vec::with_capacity(records.len());
    let mut zs = Vec::with_capacity(records.len());
    for r in records {
        let i = *by_id
            .get(r.id.as_str())
            .ok_or_else(|| CliError::new(EXIT_DATA, format!("unknown document `{}`", r.id)))?;
        let labels: Vec<&str> = r.scores.iter().map(|s| s.label.as_str()).collect();
        if labels != hier.labels().iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(CliError::new(EXIT_DATA, format!("document `{}`: labels out of global order", r.id)));
        }
        let scores: Vec<f64> = r.scores.iter().map(|s| s.score).collect();
        cols.push(Matrix::column(&scores).map_err(|e| CliError::new(EXIT_NUMERIC, e.to_string()))?);
        zs.push(targets[i].clone());
    }
    let refs: Vec<&Matrix> = cols.iter().collect();
    Ok(scored_set(&refs, &zs, &hier.level_sizes())?)
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; diagnostics go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = if code == 0 { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    if let Command::Synth { dir, level_sizes, documents } = &cli.command {
        return cmd_synth(dir, level_sizes.as_deref(), *documents, out);
    }
    let cfg = resolve_config(&cli.shared)?;
    match &cli.command {
        Command::Validate => cmd_validate(&cfg, out),
        Command::Train => cmd_train(&cfg, &cli.shared, out, err),
        Command::Evaluate { report } => cmd_evaluate(&cfg, &cli.shared, report.as_deref(), out),
        Command::Predict { input, output } => cmd_predict(&cfg, &cli.shared, input.as_deref(), output.as_deref(), out),
        Command::Explain { input, ids, top_k, min_score } => {
            cmd_explain(&cfg, &cli.shared, input.as_deref(), ids, *top_k, *min_score, out)
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

fn print(out: &mut dyn Write, line: impl AsRef<str>) -> Result<(), CliError> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| CliError::new(EXIT_CONFIG, format!("writing output: {e}")))
}

fn cmd_validate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let hier = LabelHierarchy::load(cfg.hierarchy_path()?)?;
    let sizes: Vec<String> = hier.level_sizes().iter().map(ToString::to_string).collect();
    print(out, format!("labels: {} across {} levels", hier.len(), hier.depth()))?;
    print(out, format!("levels: {}", sizes.join(", ")))?;
    for (name, path) in [("train", &cfg.train), ("valid", &cfg.valid), ("test", &cfg.test)] {
        if let Some(path) = path {
            let (_, stats) = load_corpus_with_stats(path, &hier)?;
            print(
                out,
                format!(
                    "{name}: {} documents, closure added {} labels to {} documents",
                    stats.documents, stats.labels_added, stats.closure_corrected
                ),
            )?;
        }
    }
    print(out, "ok")
}

fn load_split(path: Option<&Path>, hier: &LabelHierarchy) -> Result<Vec<Document>, CliError> {
    match path {
        Some(p) => Ok(load_corpus_with_stats(p, hier)?.0),
        None => Ok(Vec::new()),
    }
}

fn cmd_train(cfg: &RunConfig, shared: &SharedArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let hier = LabelHierarchy::load(cfg.hierarchy_path()?)?;
    let train_docs = load_split(Some(cfg.train_path()?), &hier)?;
    let valid_docs = load_split(cfg.valid.as_deref(), &hier)?;
    let t = &cfg.training;
    let vocab = Vocabulary::build(&train_docs, t.min_count)?;
    let embeddings = match &cfg.embeddings {
        Some(path) => {
            let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
            rng.set_stream(2);
            let table = load_embeddings(path, &vocab, t.dim, &mut rng)?;
            let _ = writeln!(err, "embeddings: loaded {} ({} x {})", path.display(), vocab.len(), t.dim);
            Some(table)
        }
        None => {
            let _ = writeln!(err, "embeddings: no file configured, using seeded random vectors (dim {})", t.dim);
            None
        }
    };
    if valid_docs.is_empty() {
        let _ = writeln!(err, "valid: no documents, early stopping watches the training split");
    }
    let (params, history) = train(t, &train_docs, &valid_docs, &hier, &vocab, embeddings.as_ref())?;
    for e in &history.epochs {
        let _ = writeln!(err, "epoch {:>4}  loss {:.6}  valid {:.6}", e.epoch, e.loss, e.metric);
    }
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    save_checkpoint(&params, &ckpt)?;
    let hist_path = cfg.output_dir().join("history.json");
    let mut record = serde_json::to_value(&history).expect("history serializes");
    if let Some(ts) = timestamp(shared) {
        record["created_unix"] = ts.into();
    }
    write_file(&hist_path, &(serde_json::to_string_pretty(&record).expect("json") + "\n"))?;
    print(out, format!("checkpoint: {}", ckpt.display()))?;
    print(out, format!("history: {}", hist_path.display()))?;
    print(out, format!("best epoch: {} of {}", history.best_epoch, history.epochs.len()))?;
    print(out, format!("{:.6}", history.best_metric))
}

fn load_model(cfg: &RunConfig) -> Result<(LabelHierarchy, ModelParams), CliError> {
    let hier = LabelHierarchy::load(cfg.hierarchy_path()?)?;
    let params = load_checkpoint(cfg.checkpoint_path(), &hier)?;
    Ok((hier, params))
}

fn alpha_for(shared: &SharedArgs, params: &ModelParams) -> f64 {
    shared.alpha.unwrap_or(params.config.alpha)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    shared: &SharedArgs,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (hier, params) = load_model(cfg)?;
    let docs = load_split(Some(cfg.test_path()?), &hier)?;
    let alpha = alpha_for(shared, &params);
    let rep = evaluate(&params, &docs, &hier, alpha)?;
    let mut value = round_json(serde_json::to_value(&rep).expect("report serializes"));
    if let Some(ts) = timestamp(shared) {
        value["created_unix"] = ts.into();
    }
    let path = report.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir().join("report.json"));
    write_file(&path, &(serde_json::to_string_pretty(&value).expect("json") + "\n"))?;
    print(out, format!("report: {}", path.display()))?;
    print(out, format!("documents: {}  pairs: {}  positives: {}", rep.documents, rep.pairs, rep.positives))?;
    for (name, f) in [("local", &rep.local), ("global", &rep.global), ("blended", &rep.blended)] {
        let levels: Vec<String> =
            f.per_level.iter().map(|v| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))).collect();
        print(out, format!("{name:<8} overall {:.6}  per level [{}]", f.overall, levels.join(", ")))?;
    }
    print(out, format!("{:.6}", rep.blended.overall))
}

fn cmd_predict(
    cfg: &RunConfig,
    shared: &SharedArgs,
    input: Option<&Path>,
    output: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (hier, params) = load_model(cfg)?;
    let input = match input {
        Some(p) => p,
        None => cfg.test_path()?,
    };
    let docs = load_split(Some(input), &hier)?;
    let alpha = alpha_for(shared, &params);
    let mut text = String::new();
    for d in &docs {
        let (scores, _) = params.predict(&d.tokens, alpha)?;
        let scores = hier
            .labels()
            .iter()
            .zip(scores.blended.as_slice())
            .map(|(label, &score)| LabelScore { label: label.clone(), score })
            .collect();
        text.push_str(&serde_json::to_string(&PredictionRecord { id: d.id.clone(), scores }).expect("json"));
        text.push('\n');
    }
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir().join("predictions.jsonl"));
    write_file(&path, &text)?;
    print(out, format!("predictions: {} ({} documents)", path.display(), docs.len()))
}

fn cmd_explain(
    cfg: &RunConfig,
    shared: &SharedArgs,
    input: Option<&Path>,
    ids: &[String],
    top_k: usize,
    min_score: f64,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (hier, mut params) = load_model(cfg)?;
    params.config.alpha = alpha_for(shared, &params);
    let input = match input {
        Some(p) => p,
        None => cfg.test_path()?,
    };
    let docs = load_split(Some(input), &hier)?;
    let chosen: Vec<&Document> = if ids.is_empty() {
        docs.iter().collect()
    } else {
        ids.iter()
            .map(|id| {
                docs.iter()
                    .find(|d| &d.id == id)
                    .ok_or_else(|| CliError::new(EXIT_DATA, format!("unknown document `{id}`")))
            })
            .collect::<Result<_, _>>()?
    };
    let dir = cfg.output_dir();
    let pages = dir.join("explain");
    let mut lines = String::new();
    for (i, doc) in chosen.iter().enumerate() {
        let (record, map) = explain_document(&params, &hier, doc, top_k, min_score)?;
        lines.push_str(&serde_json::to_string(&record).expect("json"));
        lines.push('\n');
        let safe: String =
            doc.id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
        write_file(&pages.join(format!("{:04}-{safe}.html", i + 1)), &render_heatmap(&map))?;
    }
    let path = dir.join("explanations.jsonl");
    write_file(&path, &lines)?;
    print(out, format!("explanations: {} ({} documents)", path.display(), chosen.len()))?;
    print(out, format!("pages: {}", pages.display()))
}

fn cmd_synth(dir: &Path, level_sizes: Option<&[usize]>, documents: usize, out: &mut dyn Write) -> Result<(), CliError> {
    if let Some(sizes) = level_sizes {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(CliError::new(EXIT_CONFIG, "level sizes must be positive"));
        }
        let hier = tree_with_level_sizes(sizes, 7)?;
        let text: String = hier.edges().iter().map(|(p, c)| format!("{p}\t{c}\n")).collect();
        write_file(&dir.join("hierarchy.tsv"), &text)?;
        return print(out, format!("hierarchy: {}", dir.join("hierarchy.tsv").display()));
    }
    let corpus = generate(&SyntheticSpec { documents, ..SyntheticSpec::default() })?;
    write_file(&dir.join("hierarchy.tsv"), &corpus.hierarchy_text())?;
    write_file(&dir.join("train.jsonl"), &write_corpus(&corpus.documents))?;
    let config = serde_json::json!({
        "hierarchy": "hierarchy.tsv",
        "train": "train.jsonl",
        "test": "train.jsonl",
        "output_dir": "out",
        "training": { "max_epochs": 500 }
    });
    write_file(&dir.join("config.json"), &(serde_json::to_string_pretty(&config).expect("json") + "\n"))?;
    print(out, format!("synthetic corpus: {} ({} documents)", dir.display(), corpus.documents.len()))
}
