//! Command-line entry point: gen-data, train, eval-retrieval, eval-caption,
//! retrieve and caption.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use bitemporal_core::dataset::{generate_corpus, Dataset, ImagePair, Split};
use bitemporal_core::evalkit::{self, EvalReport};
use bitemporal_core::model::{BackboneFinetune, Model};
use bitemporal_core::objective::{BagOfWords, FnMode};
use bitemporal_core::trainer::{self, EpochRecord};
use bitemporal_core::vocab::Vocabulary;
use bitemporal_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset_dir::{load_split, write_corpus};
use crate::error::IoError;
use crate::images::load_png;
use crate::metrics_log::MetricsLog;

pub const CHECKPOINT_FILE: &str = "checkpoint.btck";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const NAN_DUMP_FILE: &str = "nan_dump.txt";

#[derive(Parser, Debug)]
#[command(name = "bitemporal", version, about = "Bi-temporal change captioning and retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Text-to-pair retrieval metrics for one split.
    EvalRetrieval(EvalArgs),
    /// Caption metrics for one split.
    EvalCaption(EvalArgs),
    /// Rank the pairs of a split for a text query.
    Retrieve(RetrieveArgs),
    /// Caption one image pair.
    Caption(CaptionArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FnModeArg {
    None,
    Fne,
    Fna,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FinetuneArg {
    Frozen,
    Last2,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HardNegatives {
    Off,
    Count(usize),
}

fn parse_hard_negatives(s: &str) -> Result<HardNegatives, String> {
    if s == "off" {
        return Ok(HardNegatives::Off);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("expected a positive count or 'off', got {s:?}")),
        Ok(m) => Ok(HardNegatives::Count(m)),
    }
}

/// Flags shared by commands that read a run configuration.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigFlags {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub fn_mode: Option<FnModeArg>,
    /// Mined negatives per anchor, or "off".
    #[arg(long, value_parser = parse_hard_negatives)]
    pub hard_negatives: Option<HardNegatives>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub backbone_finetune: Option<FinetuneArg>,
    /// Comma-separated retrieval cutoffs.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_items: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// Report file; defaults to `reports/` next to the checkpoint.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
}

/// Failure classes, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid flags: {0}")]
    Flags(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Io(IoError::Core(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Flags(_) => 2,
            CliError::Io(IoError::File { .. }) => 4,
            CliError::Io(IoError::Parse { .. } | IoError::Format { .. }) => 5,
            CliError::Io(IoError::Version { .. }) => 6,
            CliError::Io(IoError::Core(e)) => match e {
                Error::Config(_) | Error::Validation(_) | Error::Empty(_) => 3,
                Error::NonFinite(_) | Error::DegenerateBatch(_) => 7,
                _ => 1,
            },
        }
    }

    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage",
            3 => "configuration",
            4 => "file",
            5 => "format",
            6 => "version",
            7 => "numerical",
            _ => "internal",
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads the config file (if any) and applies flag overrides.
pub fn effective_config(flags: &ConfigFlags) -> CliResult<(RunConfig, bool)> {
    let (mut cfg, mut theta_set) = match &flags.config {
        Some(p) => {
            let loaded = RunConfig::load(p)?;
            (loaded.config, loaded.theta_set)
        }
        None => (RunConfig::default(), false),
    };
    if let Some(s) = flags.seed {
        cfg.train.seed = s;
        cfg.generator.seed = s;
    }
    if let Some(t) = flags.tau {
        cfg.train.loss.tau = t;
    }
    if let Some(t) = flags.theta {
        cfg.train.loss.theta = t;
        theta_set = true;
    }
    if let Some(l) = flags.lambda {
        cfg.train.loss.lambda = l;
    }
    if let Some(m) = flags.fn_mode {
        cfg.train.loss.mode = match m {
            FnModeArg::None => FnMode::None,
            FnModeArg::Fne => FnMode::Fne,
            FnModeArg::Fna => FnMode::Fna,
        };
    }
    if let Some(h) = flags.hard_negatives {
        cfg.train.hard_negatives = match h {
            HardNegatives::Off => None,
            HardNegatives::Count(m) => Some(m),
        };
    }
    if let Some(e) = flags.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = flags.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = flags.lr {
        cfg.train.target_lr = lr;
    }
    if let Some(f) = flags.backbone_finetune {
        cfg.train.backbone_finetune = match f {
            FinetuneArg::Frozen => BackboneFinetune::Frozen,
            FinetuneArg::Last2 => BackboneFinetune::LastTwo,
            FinetuneArg::Full => BackboneFinetune::Full,
        };
    }
    if let Some(k) = &flags.k {
        cfg.eval.ks = k.clone();
    }
    if cfg.eval.ks.is_empty() || cfg.eval.ks.contains(&0) {
        return Err(CliError::Flags("--k needs positive cutoffs".into()));
    }
    Ok((cfg, theta_set))
}

fn split_of(name: &str) -> Split {
    crate::manifest::split_from_name(name).expect("restricted by clap")
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| IoError::file(path, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| IoError::file(path, e).into())
}

pub fn cmd_gen_data(args: &GenDataArgs) -> CliResult<String> {
    let (mut cfg, _) = effective_config(&args.flags)?;
    if let Some(n) = args.num_items {
        cfg.generator.num_items = n;
    }
    if let Some(s) = args.image_size {
        cfg.generator.image_size = s;
    }
    let corpus = generate_corpus(&cfg.generator)?;
    create_dir(&args.out)?;
    write_corpus(&corpus, &cfg.generator, &args.out)?;
    let none = corpus
        .items
        .iter()
        .filter(|r| r.spec.change_kind == bitemporal_core::dataset::ChangeKind::None)
        .count();
    Ok(format!(
        "wrote {} pairs ({} without change, {} verbatim duplicates) to {}",
        corpus.items.len(),
        none,
        corpus.items.iter().filter(|r| r.duplicate_of.is_some()).count(),
        args.out.display()
    ))
}

fn image_size(ds: &Dataset) -> CliResult<usize> {
    let first = ds
        .items
        .first()
        .ok_or_else(|| Error::Empty("training split is empty".into()))?;
    Ok(first.pair.before.height)
}

pub fn write_vocab(vocab: &Vocabulary, path: &Path) -> CliResult<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    write_text(path, &text)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<String> {
    let (mut cfg, theta_set) = effective_config(&args.flags)?;
    if cfg.train.loss.mode != FnMode::None && !theta_set {
        return Err(CliError::Flags(format!(
            "--fn-mode {} needs an explicit --theta (or train.loss.theta in the config file)",
            cfg.train.loss.mode.name()
        )));
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    cfg.train.validate()?;
    let train_set = load_split(&args.data, Split::Train)?;
    let val_set = load_split(&args.data, Split::Val)?;
    let vocab = Vocabulary::build(&train_set.all_captions(), cfg.model.min_freq)?;
    let model_cfg = cfg.model.to_model_config(image_size(&train_set)?, vocab.len());
    let mut model = Model::new(model_cfg, cfg.train.seed)?;

    create_dir(&args.run)?;
    cfg.echo(&args.run)?;
    write_vocab(&vocab, &args.run.join(VOCAB_FILE))?;
    let log = MetricsLog::create(&args.run.join(METRICS_FILE))?;
    let ckpt = args.run.join(CHECKPOINT_FILE);
    let mut best = f64::INFINITY;
    let mut io_err: Option<IoError> = None;
    let mut on_epoch = |r: &EpochRecord, m: &Model| -> bitemporal_core::Result<()> {
        let res = log.append(r).and_then(|_| {
            if r.val_loss < best {
                best = r.val_loss;
                save_checkpoint(&ckpt, m, &vocab, serde_json::json!({ "epoch": r.epoch, "val_loss": r.val_loss }))
            } else {
                Ok(())
            }
        });
        eprintln!(
            "epoch {:>3}  loss {:.4}  caption {:.4}  contrastive {:.4}  val {:.4}  val R@{} {:.2}",
            r.epoch, r.train_loss, r.train_caption_loss, r.train_contrastive_loss, r.val_loss, cfg.train.log_k, r.val_recall
        );
        res.map_err(|e| {
            let msg = e.to_string();
            io_err = Some(e);
            Error::Validation(msg)
        })
    };
    let mut provider = BagOfWords::new();
    let result = trainer::train(&mut model, &vocab, &cfg.train, &train_set, &val_set, &mut provider, &mut on_epoch);
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let outcome = match result {
        Ok(o) => o,
        Err(Error::NonFinite(msg)) => {
            write_text(&args.run.join(NAN_DUMP_FILE), &msg)?;
            return Err(Error::NonFinite(format!(
                "training diverged; diagnostics in {}",
                args.run.join(NAN_DUMP_FILE).display()
            ))
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    Ok(format!(
        "trained {} steps; best epoch {} (val loss {:.4}); checkpoint {}",
        outcome.steps,
        outcome.best_epoch,
        outcome.best_val_loss,
        ckpt.display()
    ))
}

/// `KEY: value` lines, values x100 with two decimals.
pub fn format_report(report: &EvalReport) -> String {
    report
        .entries()
        .iter()
        .map(|(k, v)| format!("{k}: {v:.2}\n"))
        .collect()
}

fn report_path(args: &EvalArgs, kind: &str) -> PathBuf {
    args.report.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("reports")
            .join(format!("{kind}-{}.txt", args.split))
    })
}

fn save_report(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    write_text(path, text)
}

pub fn cmd_eval_retrieval(args: &EvalArgs) -> CliResult<String> {
    let (cfg, _) = effective_config(&args.flags)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = load_split(&args.data, split_of(&args.split))?;
    let mut provider = BagOfWords::new();
    let retrieval = evalkit::evaluate_retrieval(
        &ck.model,
        &ck.vocab,
        &ds,
        &mut provider,
        cfg.train.loss.theta,
        &cfg.eval.ks,
    )?;
    let text = format_report(&EvalReport {
        retrieval,
        captioning: None,
    });
    save_report(&report_path(args, "retrieval"), &text)?;
    Ok(text)
}

pub fn cmd_eval_caption(args: &EvalArgs) -> CliResult<String> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = load_split(&args.data, split_of(&args.split))?;
    let scores = evalkit::evaluate_captioning(&ck.model, &ck.vocab, &ds)?;
    let text = format_report(&EvalReport {
        retrieval: Vec::new(),
        captioning: Some(scores),
    });
    save_report(&report_path(args, "caption"), &text)?;
    Ok(text)
}

pub fn cmd_retrieve(args: &RetrieveArgs) -> CliResult<String> {
    if args.k == 0 {
        return Err(CliError::Flags("--k must be >= 1".into()));
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = load_split(&args.data, split_of(&args.split))?;
    let ids: Vec<u64> = ds.items.iter().map(|i| i.pair_id).collect();
    let pairs = evalkit::embed_pairs(&ck.model, &ds)?;
    let q = evalkit::embed_text(&ck.model, &ck.vocab, &args.query)?;
    let scores: Vec<f64> = pairs.iter().map(|p| bitemporal_core::tensor::dot(&q, p)).collect();
    let ranked = evalkit::rank_by_score(&ids, &scores);
    let mut out = String::new();
    for (rank, id) in ranked.iter().take(args.k).enumerate() {
        let idx = ids.iter().position(|x| x == id).expect("known id");
        out.push_str(&format!("{}\t{}\t{:.6}\n", rank + 1, id, scores[idx]));
    }
    Ok(out)
}

pub fn cmd_caption(args: &CaptionArgs) -> CliResult<String> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let pair = ImagePair {
        pair_id: 0,
        before: load_png(&args.before)?,
        after: load_png(&args.after)?,
    };
    let ids = ck.model.caption(&pair)?;
    Ok(ck.vocab.decode(&ids) + "\n")
}

pub fn dispatch(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|s| s + "\n"),
        Command::Train(a) => cmd_train(a).map(|s| s + "\n"),
        Command::EvalRetrieval(a) => cmd_eval_retrieval(a),
        Command::EvalCaption(a) => cmd_eval_caption(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Caption(a) => cmd_caption(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error ({}): {e}", e.category());
            e.exit_code()
        }
    }
}
