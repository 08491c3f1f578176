//! `vulnscope` — ties the pipeline into five commands: ingest a dataset,
//! train a model, evaluate it, scan a source tree, and explain one
//! prediction. Every value flag can also come from a `--config` TOML file
//! whose keys mirror the long flag names; explicit flags win, built-in
//! defaults fill the rest. Usage problems exit 2, runtime failures exit 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use vulnscope::corpus::{ingest_corpus, load_corpus, make_split, save_corpus, CorpusSplit, SchemaKind};
use vulnscope::explain::{attribute_tokens, dump_attribution, AttributionConfig};
use vulnscope::metrics::evaluate;
use vulnscope::model::{
    load_checkpoint, save_checkpoint, train, EncoderConfig, EncoderKind, FocalParams, GcnConfig,
    ModelConfig, TrainParams, VulnModel,
};
use vulnscope::scanner::{render_report, scan, CweCatalog, ReportFormat};
use vulnscope::svg::SvgConfig;
use vulnscope::tokenizer::{load_pretrained_vocab, save_vocab, train_bpe, DEFAULT_MAX_LEN};

/// Vocabulary size `train` builds; sized for desk-scale corpora.
const VOCAB_SIZE: usize = 512;

#[derive(Parser)]
#[command(
    name = "vulnscope",
    version,
    about = "Source-code vulnerability diagnosis: classify, localize, explain"
)]
struct Cli {
    /// TOML file whose keys mirror the long flags (e.g. `embed-dim = 32`).
    /// Explicit flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw dataset (--schema bigvul|d2a|native) into the native
    /// corpus format at --out.
    Ingest(Flags),
    /// Train on a corpus; writes the checkpoint, its vocabulary, and
    /// (with --out) the epoch history as JSON.
    Train(Flags),
    /// Score a checkpoint on the corpus's held-out test split and write
    /// or print the evaluation report.
    Eval(Flags),
    /// Extract every function under --tree, diagnose each, and write or
    /// print a scan report (--format text|structured).
    Scan(Flags),
    /// Dump per-line attribution for one --function-id of the corpus.
    Explain(Flags),
}

impl Command {
    fn flags(&self) -> &Flags {
        match self {
            Command::Ingest(f)
            | Command::Train(f)
            | Command::Eval(f)
            | Command::Scan(f)
            | Command::Explain(f) => f,
        }
    }
}

#[derive(Args, Clone, Default)]
struct Flags {
    /// Corpus file: the raw input for `ingest`, the native corpus elsewhere.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Ingest input schema: bigvul, d2a, or native.
    #[arg(long)]
    schema: Option<String>,
    /// Vocabulary file: written by `train`, read by eval/scan/explain.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint file: written by `train`, read by eval/scan/explain.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Source tree root for `scan`.
    #[arg(long)]
    tree: Option<PathBuf>,
    /// Output artifact path; report commands print to stdout without it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed for initialization, shuffling, and splits.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    gcn_layers: Option<usize>,
    /// Focal-loss class balance α.
    #[arg(long)]
    alpha: Option<f64>,
    /// Focal-loss focusing exponent δ.
    #[arg(long)]
    delta: Option<f64>,
    /// Weight of the localization loss term.
    #[arg(long)]
    lambda_loc: Option<f64>,
    /// Token window length.
    #[arg(long)]
    max_len: Option<usize>,
    /// Function id to explain.
    #[arg(long)]
    function_id: Option<String>,
    /// Scan report format: text or structured.
    #[arg(long)]
    format: Option<String>,
}

/// `--config` file contents; same field names as the long flags.
#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    corpus: Option<PathBuf>,
    schema: Option<String>,
    vocab: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    tree: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    embed_dim: Option<usize>,
    gcn_layers: Option<usize>,
    alpha: Option<f64>,
    delta: Option<f64>,
    lambda_loc: Option<f64>,
    max_len: Option<usize>,
    function_id: Option<String>,
    format: Option<String>,
}

/// Flag and config values merged under "flags > config file > defaults".
struct Resolved {
    corpus: Option<PathBuf>,
    schema: Option<String>,
    vocab: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    tree: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: u64,
    epochs: usize,
    lr: f64,
    embed_dim: usize,
    gcn_layers: usize,
    alpha: f64,
    delta: f64,
    lambda_loc: f64,
    max_len: usize,
    function_id: Option<String>,
    format: String,
}

fn resolve(flags: &Flags, file: FileConfig) -> Resolved {
    let defaults = TrainParams::default();
    Resolved {
        corpus: flags.corpus.clone().or(file.corpus),
        schema: flags.schema.clone().or(file.schema),
        vocab: flags.vocab.clone().or(file.vocab),
        checkpoint: flags.checkpoint.clone().or(file.checkpoint),
        tree: flags.tree.clone().or(file.tree),
        out: flags.out.clone().or(file.out),
        seed: flags.seed.or(file.seed).unwrap_or(0),
        epochs: flags.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        lr: flags.lr.or(file.lr).unwrap_or(defaults.lr),
        embed_dim: flags.embed_dim.or(file.embed_dim).unwrap_or(64),
        gcn_layers: flags
            .gcn_layers
            .or(file.gcn_layers)
            .unwrap_or(GcnConfig::default().n_layers),
        alpha: flags.alpha.or(file.alpha).unwrap_or(defaults.focal.alpha),
        delta: flags.delta.or(file.delta).unwrap_or(defaults.focal.delta),
        lambda_loc: flags
            .lambda_loc
            .or(file.lambda_loc)
            .unwrap_or(defaults.lambda_loc),
        max_len: flags.max_len.or(file.max_len).unwrap_or(DEFAULT_MAX_LEN),
        function_id: flags.function_id.clone().or(file.function_id),
        format: flags
            .format
            .clone()
            .or(file.format)
            .unwrap_or_else(|| "text".to_string()),
    }
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> CliError {
        CliError::Runtime(e)
    }
}

impl From<vulnscope::Error> for CliError {
    fn from(e: vulnscope::Error) -> CliError {
        CliError::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<FileConfig>(&text)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let resolved = resolve(cli.command.flags(), file);
    match cli.command {
        Command::Ingest(_) => cmd_ingest(&resolved),
        Command::Train(_) => cmd_train(&resolved),
        Command::Eval(_) => cmd_eval(&resolved),
        Command::Scan(_) => cmd_scan(&resolved),
        Command::Explain(_) => cmd_explain(&resolved),
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("`{command}` requires --{flag}")))
}

fn write_or_print(out: Option<&Path>, content: &str, what: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            std::fs::write(path, content)
                .with_context(|| format!("writing {what} to {}", path.display()))?;
            println!("{what} written to {}", path.display());
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn cmd_ingest(cfg: &Resolved) -> Result<(), CliError> {
    let input = require(&cfg.corpus, "corpus", "ingest")?;
    let out = require(&cfg.out, "out", "ingest")?;
    let schema: SchemaKind = cfg
        .schema
        .as_deref()
        .unwrap_or("native")
        .parse()
        .map_err(|e| usage(format!("{e}")))?;
    let outcome = ingest_corpus(input, schema)?;
    save_corpus(&outcome.corpus, out)?;
    println!(
        "ingested {} functions to {} ({} records skipped)",
        outcome.corpus.len(),
        out.display(),
        outcome.skipped.len()
    );
    for skip in &outcome.skipped {
        eprintln!("  skipped row {}: {}", skip.row, skip.reason);
    }
    Ok(())
}

/// Attention heads for a given width: the largest of 4, 2, 1 dividing it.
fn heads_for(embed_dim: usize) -> usize {
    [4, 2, 1]
        .into_iter()
        .find(|&h| embed_dim.is_multiple_of(h))
        .unwrap_or(1)
}

fn model_config(cfg: &Resolved) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::TinyTransformer,
            layers: EncoderConfig::default().layers,
            embed_dim: cfg.embed_dim,
            heads: heads_for(cfg.embed_dim),
            seed: cfg.seed,
        },
        gcn: GcnConfig {
            n_layers: cfg.gcn_layers,
            feature_dim: cfg.embed_dim,
            ..GcnConfig::default()
        },
        head_hidden: Some(32),
        max_len: cfg.max_len,
    }
}

/// The corpus split a command works with: the stratified 80:10:10 split
/// when the corpus is large enough for one, everything-as-train otherwise
/// (tiny corpora are smoke-test material, not benchmarks).
fn split_for(corpus: &vulnscope::corpus::Corpus, seed: u64) -> CorpusSplit {
    make_split(corpus, seed).unwrap_or_else(|_| CorpusSplit::all_train(corpus, seed))
}

fn cmd_train(cfg: &Resolved) -> Result<(), CliError> {
    let corpus_path = require(&cfg.corpus, "corpus", "train")?;
    let checkpoint_path = require(&cfg.checkpoint, "checkpoint", "train")?;
    let vocab_path = require(&cfg.vocab, "vocab", "train")?;

    let corpus = load_corpus(corpus_path)?;
    let vocab = train_bpe(&corpus, VOCAB_SIZE)?;
    save_vocab(&vocab, vocab_path)?;

    let mut model = VulnModel::new(model_config(cfg), SvgConfig::default(), vocab)?;
    let split = split_for(&corpus, cfg.seed);
    let params = TrainParams {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: TrainParams::default().batch_size,
        lambda_loc: cfg.lambda_loc,
        focal: FocalParams {
            alpha: cfg.alpha,
            delta: cfg.delta,
        },
    };
    let history = train(&mut model, &corpus, &split, &params)?;
    save_checkpoint(&model, checkpoint_path)?;

    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} functions; kept epoch {}; train accuracy {:.4}{}",
        history.epochs.len(),
        split.train_ids.len(),
        history.best_epoch,
        history.final_train_accuracy,
        match history.final_train_mean_iou {
            Some(iou) => format!(", train mean IoU {iou:.4}"),
            None => String::new(),
        }
    );
    println!(
        "final epoch loss {:.6} (focal {:.6}, loc {:.6})",
        last.train_loss, last.train_focal, last.train_loc
    );
    println!("checkpoint written to {}", checkpoint_path.display());
    println!("vocabulary written to {}", vocab_path.display());
    if let Some(out) = &cfg.out {
        let json = serde_json::to_string_pretty(&history).context("serializing history")?;
        std::fs::write(out, json)
            .with_context(|| format!("writing history to {}", out.display()))?;
        println!("history written to {}", out.display());
    }
    Ok(())
}

fn load_model(cfg: &Resolved, command: &str) -> Result<VulnModel, CliError> {
    let checkpoint = require(&cfg.checkpoint, "checkpoint", command)?;
    let vocab_path = require(&cfg.vocab, "vocab", command)?;
    let vocab = load_pretrained_vocab(vocab_path)?;
    Ok(load_checkpoint(checkpoint, vocab)?)
}

fn cmd_eval(cfg: &Resolved) -> Result<(), CliError> {
    let corpus_path = require(&cfg.corpus, "corpus", "eval")?;
    let model = load_model(cfg, "eval")?;
    let corpus = load_corpus(corpus_path)?;
    let split = split_for(&corpus, cfg.seed);
    let test_ids = if split.test_ids.is_empty() {
        &split.train_ids
    } else {
        &split.test_ids
    };
    let report = evaluate(&model, &corpus, test_ids)?;
    write_or_print(
        cfg.out.as_deref(),
        &vulnscope::metrics::render_report(&report),
        "evaluation report",
    )
}

fn cmd_scan(cfg: &Resolved) -> Result<(), CliError> {
    let tree = require(&cfg.tree, "tree", "scan")?;
    let format = match cfg.format.as_str() {
        "text" => ReportFormat::Text,
        "structured" => ReportFormat::Structured,
        other => return Err(usage(format!("unknown format {other:?}; use text or structured"))),
    };
    let model = load_model(cfg, "scan")?;
    let outcome = scan(&model, tree, &CweCatalog::default())?;
    for diagnostic in &outcome.diagnostics {
        eprintln!("{diagnostic}");
    }
    write_or_print(cfg.out.as_deref(), &render_report(&outcome, format), "scan report")
}

fn cmd_explain(cfg: &Resolved) -> Result<(), CliError> {
    let corpus_path = require(&cfg.corpus, "corpus", "explain")?;
    let function_id = cfg
        .function_id
        .as_deref()
        .ok_or_else(|| usage("`explain` requires --function-id"))?;
    let model = load_model(cfg, "explain")?;
    let corpus = load_corpus(corpus_path)?;
    let function = corpus
        .get(function_id)
        .ok_or_else(|| CliError::Runtime(anyhow::anyhow!("no function {function_id:?} in the corpus")))?;

    let diagnosis = model.predict(function)?;
    let Some(target) = diagnosis
        .class
        .head_index()
        .filter(|_| diagnosis.class.is_vulnerable())
    else {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "{function_id} is predicted non-vulnerable; there is nothing to attribute"
        )));
    };
    let prepared = model.prepare(function)?;
    let attr = attribute_tokens(&model, &prepared, target, &AttributionConfig::default())?;

    let mut dump = format!(
        "function {function_id}\npredicted {} (confidence {:.4})\n",
        diagnosis.class, diagnosis.confidence
    );
    if let Some(range) = diagnosis.range {
        dump.push_str(&format!("lines {}-{}\n", range.start(), range.end()));
    }
    dump.push_str(&dump_attribution(&attr));
    match vulnscope::explain::select_root_cause(&attr.line_scores, &diagnosis, function)? {
        Some(rc) => dump.push_str(&format!("root_cause {} {}\n", rc.line, rc.score)),
        None => dump.push_str("root_cause none\n"),
    }
    write_or_print(cfg.out.as_deref(), &dump, "attribution dump")
}
