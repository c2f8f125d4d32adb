//! Command-line entry point: corpus synthesis, training, evaluation, the
//! ablation grid and gradient checks.
//!
//! Logs are JSON lines on stdout; artifacts go to `--out`. Exit codes: 0 on
//! success, 1 on invalid input, 2 on runtime failure.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use densecap::corpus::{generate_corpus, save_results, Corpus, CorpusMeta, SynthConfig, VideoRecord};
use densecap::metrics::Metric;
use densecap::pipeline::{self, ProposalSource};
use densecap::training::{grad_check, GradCheckOptions, Mode, Part, TinyDims, TrainConfig};
use densecap::{Real, RealCheckpoint};
use serde_json::{json, Value};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "densecap", version, about = "Dense video captioning: synthesize, train, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted ground truth.
    Synth(SynthArgs),
    /// Train with cross-entropy (from scratch or resumed) or self-critical fine-tuning.
    Train(TrainArgs),
    /// Caption a corpus split and score it.
    Eval(EvalArgs),
    /// Train and score the five decoder ablation rows.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients at tiny sizes.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key-value config file (TOML syntax).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Xe,
    Scst,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory written by `synth` (or laid out the same way).
    #[arg(long)]
    corpus: PathBuf,
    /// Overrides the mode of the config file.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Checkpoint to resume from (xe) or fine-tune (scst, required).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProposalArg {
    Gt,
    Learnt,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bleu4,
    Meteor,
    Cider,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "gt")]
    proposals: ProposalArg,
    #[arg(long, value_enum, default_value = "all")]
    metric: MetricArg,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// tsrm, position_embed, cmg, sent_rnn, frame_attention, word_rnn, selector, full or all.
    #[arg(long, default_value = "all")]
    part: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Doubles the analytic gradient of this tensor (negative control).
    #[arg(long)]
    corrupt: Option<String>,
}

/// Failure caused by the caller's input rather than by the run itself.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: impl fmt::Display) -> anyhow::Error {
    Invalid(e.to_string()).into()
}

fn is_invalid(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<Invalid>().is_some() {
        return true;
    }
    matches!(
        e.downcast_ref::<densecap::Error>(),
        Some(
            densecap::Error::Config(_)
                | densecap::Error::Checkpoint(_)
                | densecap::Error::Annotation { .. }
                | densecap::Error::Features { .. }
                | densecap::Error::Segment { .. }
        )
    )
}

fn emit(v: Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", v);
    let _ = out.flush();
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| invalid(format!("{}: {}", path.display(), e)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| invalid(format!("{}: {}", path.display(), e)))
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?).map_err(invalid)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    let c = Corpus::load(dir).map_err(invalid)?;
    if c.train.is_empty() {
        return Err(invalid(format!("corpus {} has no training videos", dir.display())));
    }
    Ok(c)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.common.config {
        Some(p) => SynthConfig::from_toml(&read_text(p)?).map_err(invalid)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(invalid)?;
    make_dir(&a.common.out)?;
    let videos = generate_corpus(&cfg)?;
    let n_train = videos.len() - cfg.n_val;
    let mut videos = videos;
    let val = videos.split_off(n_train);
    let corpus = Corpus { meta: CorpusMeta { stride: cfg.stride, rgb_dim: cfg.rgb_dim, flow_dim: cfg.flow_dim }, train: videos, val };
    corpus.save(&a.common.out)?;
    let vocab = pipeline::build_vocab(&corpus.train, &TrainConfig::default());
    vocab.save(&a.common.out.join(Corpus::VOCAB_FILE))?;
    let events: usize = corpus.train.iter().chain(&corpus.val).map(|r| r.events.len()).sum();
    emit(json!({"event": "synth", "train": corpus.train.len(), "val": corpus.val.len(), "events": events, "vocab": vocab.len(), "out": a.common.out}));
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = train_config(&a.common)?;
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Xe => Mode::Xe,
            ModeArg::Scst => Mode::Scst,
        };
    }
    let corpus = load_corpus(&a.corpus)?;
    let init = match &a.init {
        Some(p) => Some(RealCheckpoint::load(p).map_err(|e| invalid(format!("checkpoint {}: {}", p.display(), e)))?),
        None if cfg.mode == Mode::Scst => return Err(invalid("scst mode needs an xe checkpoint via --init")),
        None => None,
    };
    make_dir(&a.common.out)?;
    emit(json!({"event": "start", "mode": cfg.mode, "seed": cfg.seed, "train_videos": corpus.train.len(), "resume_step": init.as_ref().map(|c| c.step)}));
    let mut log = |v: Value| emit(v);
    let ck = match (cfg.mode, init) {
        (Mode::Xe, init) => pipeline::train_xe_pipeline::<Real>(&corpus.train, &cfg, init, &mut log)?.0,
        (Mode::Scst, Some(init)) => pipeline::train_scst_pipeline::<Real>(init, &corpus.train, &cfg, &mut log)?.0,
        (Mode::Scst, None) => unreachable!("checked above"),
    };
    ck.save(&a.common.out)?;
    emit(json!({"event": "checkpoint", "path": a.common.out, "step": ck.step, "final_loss": ck.final_loss}));
    Ok(())
}

fn metrics(m: MetricArg) -> Vec<Metric> {
    match m {
        MetricArg::Bleu4 => vec![Metric::Bleu4],
        MetricArg::Meteor => vec![Metric::Meteor],
        MetricArg::Cider => vec![Metric::Cider],
        MetricArg::All => Metric::ALL.to_vec(),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = RealCheckpoint::load(&a.checkpoint).map_err(|e| invalid(format!("checkpoint {}: {}", a.checkpoint.display(), e)))?;
    let corpus = load_corpus(&a.corpus)?;
    ck.check_vocab(&pipeline::build_vocab(&corpus.train, &ck.config)).map_err(invalid)?;
    let records: &[VideoRecord] = match a.split {
        SplitArg::Train => &corpus.train,
        SplitArg::Val => &corpus.val,
    };
    if records.is_empty() {
        return Err(invalid("the selected split has no videos"));
    }
    let source = match a.proposals {
        ProposalArg::Gt => ProposalSource::Gt,
        ProposalArg::Learnt => ProposalSource::Learnt,
    };
    make_dir(&a.out)?;
    let (spans, report) = pipeline::evaluate(&ck, records, source, &metrics(a.metric))?;
    save_results(&a.out.join("results.json"), &pipeline::to_predictions(&spans))?;
    write_text(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&a.out.join("report.txt"), &report.to_table())?;
    eprint!("{}", report.to_table());
    let scores: serde_json::Map<String, Value> = report.metrics.iter().map(|(k, v)| (k.clone(), json!(v.score))).collect();
    emit(json!({"event": "eval", "proposals": source.to_string(), "videos": report.n_videos, "predictions": report.n_predictions, "scores": scores}));
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = train_config(&a.common)?;
    let corpus = load_corpus(&a.corpus)?;
    if corpus.val.is_empty() {
        return Err(invalid("ablation needs validation videos"));
    }
    make_dir(&a.common.out)?;
    let mut log = |v: Value| emit(v);
    let table = pipeline::ablate::<Real>(&corpus.train, &corpus.val, &cfg, &mut log)?;
    write_text(&a.common.out.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
    write_text(&a.common.out.join("ablation.txt"), &table.to_table())?;
    eprint!("{}", table.to_table());
    emit(json!({"event": "ablation", "rows": table.rows.len(), "out": a.common.out}));
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let parts: Vec<Part> = if a.part == "all" {
        Part::ALL.to_vec()
    } else {
        vec![a.part.parse().map_err(invalid)?]
    };
    let defaults = GradCheckOptions::default();
    let opts = GradCheckOptions { tolerance: a.tolerance, seed: a.seed.unwrap_or(defaults.seed), corrupt: a.corrupt.clone(), ..defaults };
    let mut failed = Vec::new();
    for p in parts {
        let r = grad_check(p, &TinyDims::default(), &opts)?;
        emit(json!({"event": "gradcheck", "part": p.to_string(), "max_rel_err": r.max_rel_err, "passed": r.passed, "failures": r.failures}));
        if !r.passed {
            failed.push(p.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow::anyhow!("gradient check failed for {}", failed.join(", ")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if is_invalid(&e) { 1 } else { 2 };
            emit(json!({"event": "error", "exit_code": code, "message": format!("{:#}", e)}));
            eprintln!("error: {:#}", e);
            ExitCode::from(code)
        }
    }
}
