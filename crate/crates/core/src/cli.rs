//! Command-line interface: `ingest`, `train`, `eval`, `predict` and
//! `loss-landscape`.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 numerical abort.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::{compute_propensities, Corpus, IngestOptions, PropensityTable};
use crate::error::{Error, Result};
use crate::inference::{build_index, evaluate_model, predict, ranked_labels, ScoreMode};
use crate::losses::{triplet_kernel, MarginConfig, MarginMode};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{write_atomic, Model};
use crate::retrieval::{read_predictions, write_predictions};
use crate::trainer::{train_with, with_threads, TrainConfig};

pub const SEED_ENV: &str = "PRIME_SEED";

#[derive(Debug, Parser)]
#[command(name = "prime", version, about = "Label-prototype extreme multi-label retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus and write its canonical form, propensities and stats.
    Ingest(IngestArgs),
    /// Train a model and write checkpoint, step log and run manifest.
    Train(Box<TrainArgs>),
    /// Score a checkpoint (or a predictions file) against ground truth.
    Eval(EvalArgs),
    /// Write top-k predictions for every query.
    Predict(PredictArgs),
    /// Dump the loss and gradient of both triplet kernels over a grid.
    LossLandscape(LandscapeArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Query file: `id<TAB>label,label,...<TAB>text` per line.
    #[arg(long)]
    pub queries: PathBuf,
    /// Label file: `id<TAB>text` per line.
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Accept queries without positives.
    #[arg(long)]
    pub allow_empty: bool,
    #[arg(long, default_value_t = crate::corpus::DEFAULT_PROPENSITY_A)]
    pub propensity_a: f64,
    #[arg(long, default_value_t = crate::corpus::DEFAULT_PROPENSITY_B)]
    pub propensity_b: f64,
}

/// Every training option. Unset flags fall back to the config file, then to
/// built-in defaults.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with `TrainConfig` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Prototype network FFN width (0 = 4·dim).
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=2))]
    pub positives_per_query: Option<u64>,
    #[arg(long)]
    pub gamma_min: Option<f64>,
    #[arg(long)]
    pub gamma_max: Option<f64>,
    /// Margin of the fixed-margin baseline.
    #[arg(long)]
    pub fixed_margin: Option<f64>,
    /// Hinge margin of the prototype regularizer.
    #[arg(long)]
    pub reg_margin: Option<f64>,
    /// Weight of the prototype regularizer.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<MarginMode>,
    /// Include the query-to-label text term.
    #[arg(long)]
    pub query_label_term: Option<bool>,
    /// Include the label-to-query text term.
    #[arg(long)]
    pub label_query_term: Option<bool>,
    /// Include the prototype regularizer.
    #[arg(long)]
    pub regularizer_term: Option<bool>,
    /// Centroid EMA decay.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of shared free vectors (clamped to the label count).
    #[arg(long)]
    pub bank_size: Option<usize>,
    /// Overridden by the PRIME_SEED environment variable.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub refresh_period: Option<usize>,
    #[arg(long)]
    pub propensity_a: Option<f64>,
    #[arg(long)]
    pub propensity_b: Option<f64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Model to evaluate; alternative to `--predictions`.
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Previously written predictions file.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Propensity table from `ingest`; fitted on this corpus when absent.
    #[arg(long)]
    pub propensity: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScoreMode::Prototype)]
    pub mode: ScoreMode,
    #[arg(long = "k", value_delimiter = ',', default_values_t = vec![1, 3, 5])]
    pub ks: Vec<usize>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = ScoreMode::Prototype)]
    pub mode: ScoreMode,
    /// Predictions file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also export the label vectors (`id<TAB>hex`).
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Grid points per axis over [-1, 1].
    #[arg(long, default_value_t = 201, value_parser = clap::value_parser!(u64).range(2..))]
    pub points: u64,
    #[arg(long, default_value_t = crate::losses::DEFAULT_GAMMA_MIN)]
    pub gamma_min: f64,
    #[arg(long, default_value_t = crate::losses::DEFAULT_GAMMA_MAX)]
    pub gamma_max: f64,
    #[arg(long, default_value_t = crate::losses::DEFAULT_FIXED_MARGIN)]
    pub fixed_margin: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::LossLandscape(a) => cmd_loss_landscape(&a),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes).as_slice()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    write_atomic(path, &buf)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

#[derive(Debug, Serialize)]
struct IngestStats {
    #[serde(flatten)]
    stats: crate::corpus::CorpusStats,
    propensity_fitted: bool,
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let corpus = Corpus::ingest(
        &a.corpus.queries,
        &a.corpus.labels,
        IngestOptions {
            allow_empty: a.allow_empty,
        },
    )?;
    create_dir(&a.out)?;
    corpus.write_canonical(&a.out)?;
    let fitted = match compute_propensities(&corpus, a.propensity_a, a.propensity_b) {
        Ok(table) => {
            write_with(&a.out.join("propensity.tsv"), |w| table.write_tsv(&corpus, w))?;
            true
        }
        Err(e) if corpus.num_queries() < 3 => {
            eprintln!("warning: {e}; propensity.tsv not written");
            false
        }
        Err(e) => return Err(e),
    };
    let stats = IngestStats {
        stats: corpus.stats(),
        propensity_fitted: fitted,
    };
    write_with(&a.out.join("stats.json"), |w| writeln!(w, "{}", to_json(&stats)))?;
    println!(
        "queries {} labels {} nnz {}",
        stats.stats.num_queries, stats.stats.num_labels, stats.stats.nnz
    );
    Ok(())
}

impl TrainArgs {
    /// Defaults, then the config file, then explicit flags, then `PRIME_SEED`.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set!(
            dim => dim, vocab => vocab, max_seq_len => max_seq_len, ffn_dim => ffn_dim,
            dropout => dropout, lr => lr, weight_decay => weight_decay,
            warmup_steps => warmup_steps, epochs => epochs, batch_size => batch_size,
            gamma_min => margins.gamma_min, gamma_max => margins.gamma_max,
            fixed_margin => margins.fixed_margin, reg_margin => margins.reg_margin,
            lambda => margins.lambda, mode => mode,
            query_label_term => terms.query_label, label_query_term => terms.label_query,
            regularizer_term => terms.regularizer,
            alpha => alpha, bank_size => bank_size, seed => seed,
            refresh_period => refresh_period, propensity_a => propensity_a,
            propensity_b => propensity_b, threads => threads,
        );
        if let Some(p) = self.positives_per_query {
            cfg.positives_per_query = p as usize;
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {s:?}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct Artifact {
    path: PathBuf,
    sha256: String,
}

impl Artifact {
    fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    epochs: usize,
    steps: usize,
    final_mean_loss: f64,
    final_easy_fraction: f64,
    max_encoded_labels: usize,
    train_metrics: EvalResult,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: &'static str,
    version: &'static str,
    git_describe: String,
    seed: u64,
    config: TrainConfig,
    started_unix: f64,
    finished_unix: f64,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
    summary: TrainSummary,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let started = unix_now();
    let corpus = Corpus::ingest(&a.corpus.queries, &a.corpus.labels, IngestOptions::default())?;
    create_dir(&a.out)?;

    let log_path = a.out.join("train_log.jsonl");
    let log_file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut log_err = None;
    let output = train_with(&corpus, &cfg, |report| {
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{}", serde_json::to_string(report).expect("serializable")) {
                log_err = Some(e);
            }
        }
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    let output = output?;
    for e in &output.epochs {
        eprintln!(
            "epoch {:>4}  steps {:>4}  loss {:.6}  easy {:.3}",
            e.epoch, e.steps, e.mean_loss, e.easy_fraction
        );
    }

    let ckpt = a.out.join("checkpoint.bin");
    output.model.save(&ckpt)?;
    let prop_path = a.out.join("propensity.tsv");
    write_with(&prop_path, |w| output.propensity.write_tsv(&corpus, w))?;

    let ks: Vec<usize> = [1, 5].into_iter().filter(|&k| k <= corpus.num_labels()).collect();
    let train_metrics = with_threads(cfg.threads, || {
        evaluate_model(&output.model, &corpus, &output.propensity.p, &ks, ScoreMode::Prototype)
    })??;
    let last = output.epochs.last().expect("at least one epoch");
    let summary = TrainSummary {
        epochs: output.epochs.len(),
        steps: output.reports.len(),
        final_mean_loss: last.mean_loss,
        final_easy_fraction: last.easy_fraction,
        max_encoded_labels: output.epochs.iter().map(|e| e.max_encoded_labels).max().unwrap_or(0),
        train_metrics,
    };
    eprint!("{}", summary.train_metrics.table());

    let manifest = RunManifest {
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        git_describe: git_describe(),
        seed: cfg.seed,
        config: cfg.clone(),
        started_unix: started,
        finished_unix: unix_now(),
        inputs: vec![Artifact::of(&a.corpus.queries)?, Artifact::of(&a.corpus.labels)?],
        outputs: vec![Artifact::of(&ckpt)?, Artifact::of(&log_path)?, Artifact::of(&prop_path)?],
        summary,
    };
    write_with(&a.out.join("manifest.json"), |w| writeln!(w, "{}", to_json(&manifest)))?;
    Ok(())
}

fn check_ks(ks: &[usize], num_labels: usize) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::Config("at least one k is required".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > num_labels) {
        return Err(Error::Config(format!("k = {k} must lie in 1..={num_labels}")));
    }
    Ok(())
}

fn eval_propensity(path: Option<&Path>, corpus: &Corpus) -> Result<PropensityTable> {
    match path {
        Some(p) => PropensityTable::read_tsv(p, corpus.labels()),
        None if corpus.num_queries() < 3 => Ok(PropensityTable::uniform(corpus.num_labels())),
        None => compute_propensities(corpus, crate::corpus::DEFAULT_PROPENSITY_A, crate::corpus::DEFAULT_PROPENSITY_B),
    }
}

/// Maps a predictions file onto corpus query and label indices.
fn predictions_to_indices(text: &str, corpus: &Corpus) -> Result<Vec<Vec<usize>>> {
    let labels: HashMap<&str, usize> = corpus.labels().iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
    let queries: HashMap<&str, usize> = corpus.queries().iter().enumerate().map(|(i, q)| (q.id.as_str(), i)).collect();
    let mut out = vec![None; corpus.num_queries()];
    for (qid, items) in read_predictions(text)? {
        let &q = queries
            .get(qid.as_str())
            .ok_or_else(|| Error::Data(format!("predictions mention unknown query {qid:?}")))?;
        let row = items
            .iter()
            .map(|(l, _)| {
                labels
                    .get(l.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("predictions mention unknown label {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out[q] = Some(row);
    }
    out.into_iter()
        .enumerate()
        .map(|(q, row)| row.ok_or_else(|| Error::Data(format!("no predictions for query {}", corpus.query(q).id))))
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let corpus = Corpus::ingest(&a.corpus.queries, &a.corpus.labels, IngestOptions { allow_empty: true })?;
    check_ks(&a.ks, corpus.num_labels())?;
    let propensity = eval_propensity(a.propensity.as_deref(), &corpus)?;
    let result = match (&a.checkpoint, &a.predictions) {
        (_, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let preds = predictions_to_indices(&text, &corpus)?;
            evaluate(&preds, &corpus.relevance_rows(), &propensity.p, &a.ks)?
        }
        (Some(ckpt), None) => {
            let model = Model::load(ckpt)?;
            with_threads(a.threads, || evaluate_model(&model, &corpus, &propensity.p, &a.ks, a.mode))??
        }
        (None, None) => return Err(Error::Config("either --checkpoint or --predictions is required".into())),
    };
    let json = serde_json::to_string(&result).expect("serializable");
    if let Some(p) = &a.json_out {
        write_with(p, |w| writeln!(w, "{json}"))?;
    }
    print!("{}", result.table());
    println!("{json}");
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let corpus = Corpus::ingest(&a.corpus.queries, &a.corpus.labels, IngestOptions { allow_empty: true })?;
    check_ks(&[a.k], corpus.num_labels())?;
    let model = Model::load(&a.checkpoint)?;
    let (index, hits, elapsed) = with_threads(a.threads, || -> Result<_> {
        let index = build_index(&model, &corpus, a.mode)?;
        let start = Instant::now();
        let hits = predict(&model, &index, &corpus, a.k)?;
        Ok((index, hits, start.elapsed()))
    })??;
    let query_ids: Vec<String> = corpus.queries().iter().map(|q| q.id.clone()).collect();
    write_with(&a.out, |w| write_predictions(w, &query_ids, index.ids(), &hits))?;
    if let Some(p) = &a.export {
        write_with(p, |w| index.write_export(w))?;
    }
    let ranked = ranked_labels(&hits);
    eprintln!(
        "{} queries, {} predictions each, {:.3} ms/query",
        ranked.len(),
        a.k,
        1e3 * elapsed.as_secs_f64() / ranked.len().max(1) as f64
    );
    Ok(())
}

/// Grid coordinate `i` of `n` evenly spaced points on [-1, 1].
pub fn grid_value(i: u64, n: u64) -> f64 {
    (2.0 * i as f64 - (n - 1) as f64) / (n - 1) as f64
}

fn cmd_loss_landscape(a: &LandscapeArgs) -> Result<()> {
    let cfg = MarginConfig {
        gamma_min: a.gamma_min,
        gamma_max: a.gamma_max,
        fixed_margin: a.fixed_margin,
        ..MarginConfig::default()
    };
    cfg.validate()?;
    let mut buf = Vec::new();
    let emit = |w: &mut Vec<u8>| -> std::io::Result<()> {
        writeln!(w, "mode,s_qp,s_qn,loss,d_sap,d_san,region")?;
        for (mode, name) in [(MarginMode::Fixed, "fixed"), (MarginMode::Dynamic, "dynamic")] {
            for i in 0..a.points {
                let s_qp = grid_value(i, a.points);
                for j in 0..a.points {
                    let s_qn = grid_value(j, a.points);
                    let t = triplet_kernel(s_qp, s_qn, &cfg, mode);
                    writeln!(
                        w,
                        "{name},{s_qp},{s_qn},{},{},{},{}",
                        t.loss,
                        t.d_sap,
                        t.d_san,
                        t.region.as_str()
                    )?;
                }
            }
        }
        Ok(())
    };
    match &a.out {
        Some(path) => write_with(path, emit),
        None => {
            emit(&mut buf).expect("write to Vec");
            std::io::stdout()
                .write_all(&buf)
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}
