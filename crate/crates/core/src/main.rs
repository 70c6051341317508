//! Command-line front end: corpus generation, BPE training, pretraining,
//! fine-tuning and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::json;

use phonolm::corpus::{build_corpus, read_corpus, read_sentences, write_corpus, ConfusionClasses, Lexicon, NoiseConfig, SyntheticTask};
use phonolm::eval::EvalReport;
use phonolm::study::{prepare, run_experiments, StudyConfig};
use phonolm::tokenizer::{build_joint_vocab, train_bpe, BpeMode, JointVocabulary, DEFAULT_WORD_MERGES, MAX_PHONEME_VOCAB};
use phonolm::trainer::{encode_records, evaluate_checkpoint, finetune, pretrain, Checkpoint, Experiment, RunConfig, RunMode, Session};
use phonolm::{Error, Result};

/// Exit code for command-line usage errors.
const USAGE_EXIT: u8 = 2;

#[derive(Parser)]
#[command(name = "phonolm", version, about = "Joint word + phoneme masked-LM toolkit", arg_required_else_help = true)]
struct Cli {
    /// Seed for every stochastic step; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print a machine-readable JSON result on standard output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ASR transcripts and phoneme sequences for clean sentences.
    BuildCorpus(BuildCorpusArgs),
    /// Train word and phoneme BPE models and write the joint vocabulary.
    TrainBpe(TrainBpeArgs),
    /// Masked-LM pretraining.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier, optionally from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint with a WER-bucketed report.
    Evaluate(EvaluateArgs),
    /// Run the synthetic comparison of pretraining setups.
    Study(StudyArgs),
}

#[derive(Args)]
struct BuildCorpusArgs {
    /// Clean sentences, one per line, optionally `<label>\t<text>`.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Generate this many synthetic labelled sentences instead of reading `--input`.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Number of classes of the synthetic task.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Output corpus (JSON lines).
    #[arg(long)]
    output: PathBuf,
    /// Pronunciation lexicon in CMUdict format (built-in lexicon when absent).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Phoneme confusion classes, one class per line (built-in table when absent).
    #[arg(long)]
    confusion: Option<PathBuf>,
    /// Noise channel settings (JSON).
    #[arg(long)]
    noise_config: Option<PathBuf>,
    /// Write corpus statistics (JSON) here.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct TrainBpeArgs {
    /// Corpus (JSON lines); words come from `asr` and `clean`, phonemes from `phoneme`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output vocabulary (JSON).
    #[arg(long)]
    output: PathBuf,
    /// Word-mode merge budget.
    #[arg(long, default_value_t = DEFAULT_WORD_MERGES)]
    word_merges: usize,
    /// Phoneme-mode merge budget; the phoneme vocabulary is capped at 600 units.
    #[arg(long, default_value_t = MAX_PHONEME_VOCAB)]
    phoneme_merges: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON); flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<RunMode>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Directory for periodic checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Start from this checkpoint's weights.
    #[arg(long, conflicts_with = "resume")]
    init: Option<PathBuf>,
    /// Continue an interrupted run from one of its checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Validation corpus; a share of the training corpus is held out when absent.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Test corpus evaluated with the selected weights.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Write the test report (JSON) here.
    #[arg(long, requires = "test")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled test corpus (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Write the report (JSON) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    /// Study configuration (JSON); defaults apply to absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment rows to run (default: Joint, B2, A1).
    #[arg(long, value_delimiter = ',')]
    experiments: Vec<String>,
    /// Write one report per row (JSON) into this directory.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = Output { json: cli.json };
    match cli.command {
        Command::BuildCorpus(args) => build_corpus_cmd(args, cli.seed, out),
        Command::TrainBpe(args) => train_bpe_cmd(args, out),
        Command::Pretrain(args) => pretrain_cmd(args, cli.seed, out),
        Command::Finetune(args) => finetune_cmd(args, cli.seed, out),
        Command::Evaluate(args) => evaluate_cmd(args, out),
        Command::Study(args) => study_cmd(args, cli.seed, out),
    }
}

/// Chooses between a human summary and a JSON document on standard output.
#[derive(Clone, Copy)]
struct Output {
    json: bool,
}

impl Output {
    fn emit<T: Serialize>(self, value: &T, human: impl FnOnce() -> String) -> Result<()> {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value)?);
        } else {
            println!("{}", human());
        }
        Ok(())
    }
}

fn load_lexicon(path: Option<&Path>) -> Result<Lexicon> {
    match path {
        Some(p) => Lexicon::load(p),
        None => Ok(Lexicon::builtin()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or run config field)")))
}

fn build_corpus_cmd(args: BuildCorpusArgs, seed: Option<u64>, out: Output) -> Result<()> {
    let lexicon = load_lexicon(args.lexicon.as_deref())?;
    let classes = match &args.confusion {
        Some(p) => ConfusionClasses::load(p)?,
        None => ConfusionClasses::builtin(),
    };
    let mut noise: NoiseConfig = match &args.noise_config {
        Some(p) => read_json(p)?,
        None => NoiseConfig::default(),
    };
    if let Some(s) = seed {
        noise.seed = s;
    }
    let sources = match (args.synthetic, &args.input) {
        (Some(n), _) => SyntheticTask::from_lexicon(&lexicon, args.classes, 4, 200).generate(n, noise.seed),
        (None, Some(p)) => read_sentences(p)?,
        (None, None) => unreachable!("clap requires --input or --synthetic"),
    };
    let (records, stats) = build_corpus(&sources, &noise, &lexicon, &classes)?;
    write_corpus(&args.output, &records)?;
    if let Some(p) = &args.stats {
        std::fs::write(p, serde_json::to_string_pretty(&stats)?).map_err(|e| Error::io(p, e))?;
    }
    out.emit(&stats, || {
        format!(
            "{} of {} sentences kept ({} below and {} above the WER window, {} empty); mean WER {:.4}, PER {:.4} -> {}",
            stats.emitted,
            stats.input_count,
            stats.rejected_low_wer,
            stats.rejected_high_wer,
            stats.skipped_empty,
            stats.mean_wer,
            stats.phoneme_error_rate,
            args.output.display()
        )
    })
}

fn train_bpe_cmd(args: TrainBpeArgs, out: Output) -> Result<()> {
    let records = read_corpus(&args.corpus)?;
    let words: Vec<&str> = records
        .iter()
        .flat_map(|r| r.asr.as_deref().into_iter().chain([r.clean.as_str()]))
        .collect();
    let phonemes: Vec<&str> = records.iter().filter_map(|r| r.phoneme.as_deref()).collect();
    if phonemes.is_empty() {
        return Err(Error::Input(format!("{} has no phoneme fields to train on", args.corpus.display())));
    }
    let vocab = build_joint_vocab(
        train_bpe(&words, args.word_merges, BpeMode::Word)?,
        train_bpe(&phonemes, args.phoneme_merges, BpeMode::Phoneme)?,
    )?;
    vocab.save(&args.output)?;
    let summary = json!({
        "size": vocab.size(),
        "word_tokens": vocab.word_model().len(),
        "phoneme_tokens": vocab.phoneme_model().len(),
        "output": args.output,
    });
    out.emit(&summary, || {
        format!(
            "{} tokens ({} word, {} phoneme) -> {}",
            vocab.size(),
            vocab.word_model().len(),
            vocab.phoneme_model().len(),
            args.output.display()
        )
    })
}

/// Run configuration from `--config` with command-line overrides applied.
fn run_config(args: &RunArgs, seed: Option<u64>, default_mode: RunMode) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(default_mode),
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    let overrides = [
        (&args.corpus, &mut cfg.corpus),
        (&args.vocab, &mut cfg.vocab),
        (&args.lexicon, &mut cfg.lexicon),
        (&args.checkpoint_dir, &mut cfg.checkpoint_dir),
        (&args.output, &mut cfg.output),
    ];
    for (flag, field) in overrides {
        if flag.is_some() {
            field.clone_from(flag);
        }
    }
    cfg.epochs = args.epochs.or(cfg.epochs);
    cfg.max_steps = args.max_steps.or(cfg.max_steps);
    cfg.lr = args.lr.or(cfg.lr);
    cfg.batch_size = args.batch_size.or(cfg.batch_size);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain_cmd(args: PretrainArgs, seed: Option<u64>, out: Output) -> Result<()> {
    let cfg = run_config(&args.run, seed, RunMode::PretrainJoint)?;
    if !cfg.mode.is_pretrain() {
        return Err(Error::Config(format!("`pretrain` needs a pretraining mode, not {}", cfg.mode)));
    }
    let records = read_corpus(required(&cfg.corpus, "corpus")?)?;
    let vocab = JointVocabulary::load(required(&cfg.vocab, "vocabulary")?)?;
    let lexicon = load_lexicon(cfg.lexicon.as_deref())?;
    required(&cfg.output, "output checkpoint")?;
    let (checkpoint, steps) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let data = encode_records(&records, &vocab, &lexicon, cfg.mode, cfg.phoneme_source, false)?;
            let mut session = Session::pretrain(&data, &vocab, &cfg, ckpt.model.clone())?;
            session.restore(&ckpt)?;
            info!("resuming {} at step {}", cfg.mode, session.counters().step);
            session.run()?;
            let steps = std::mem::take(&mut session.steps);
            let checkpoint = session.finish();
            checkpoint.save(required(&cfg.output, "output checkpoint")?)?;
            (checkpoint, steps)
        }
        None => {
            let init = args.init.as_deref().map(Checkpoint::load).transpose()?;
            let outcome = pretrain(&records, &vocab, &lexicon, &cfg, init.as_ref())?;
            (outcome.checkpoint, outcome.steps)
        }
    };
    let last = steps.iter().rev().find(|s| !s.skipped).map(|s| s.loss);
    let summary = json!({
        "mode": cfg.mode,
        "steps": checkpoint.counters.step,
        "last_loss": last,
        "output": cfg.output,
    });
    out.emit(&summary, || {
        let loss = last.map_or("n/a".to_string(), |l| format!("{:.4}", l.total));
        format!(
            "{}: {} steps, last loss {loss} -> {}",
            cfg.mode,
            checkpoint.counters.step,
            cfg.output.as_deref().unwrap_or(Path::new("")).display()
        )
    })
}

fn finetune_cmd(args: FinetuneArgs, seed: Option<u64>, out: Output) -> Result<()> {
    let mut cfg = run_config(&args.run, seed, RunMode::FinetuneJoint)?;
    if cfg.mode.is_pretrain() {
        return Err(Error::Config(format!("`finetune` needs a fine-tuning mode, not {}", cfg.mode)));
    }
    if args.checkpoint.is_some() {
        cfg.init_checkpoint.clone_from(&args.checkpoint);
    }
    if args.validation.is_some() {
        cfg.validation_corpus.clone_from(&args.validation);
    }
    if args.test.is_some() {
        cfg.test_corpus.clone_from(&args.test);
    }
    let train = read_corpus(required(&cfg.corpus, "corpus")?)?;
    let validation = cfg.validation_corpus.as_deref().map(read_corpus).transpose()?;
    let test = cfg.test_corpus.as_deref().map(read_corpus).transpose()?;
    let vocab = JointVocabulary::load(required(&cfg.vocab, "vocabulary")?)?;
    let lexicon = load_lexicon(cfg.lexicon.as_deref())?;
    required(&cfg.output, "output checkpoint")?;
    let init = cfg.init_checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let outcome = finetune(init.as_ref(), &train, validation.as_deref(), test.as_deref(), &vocab, &lexicon, &cfg)?;
    let mut report = outcome.test;
    if let Some(r) = report.as_mut() {
        r.meta.checkpoint = cfg.output.as_deref().unwrap_or(Path::new("")).display().to_string();
        if let Some(p) = &args.report {
            r.save(p)?;
        }
    }
    let best = outcome.checkpoint.best;
    let summary = json!({
        "mode": cfg.mode,
        "steps": outcome.checkpoint.counters.step,
        "best_validation": best,
        "test": report,
        "output": cfg.output,
    });
    out.emit(&summary, || {
        let mut text = match best {
            Some(b) => format!(
                "{}: best validation accuracy {:.4} (macro-F1 {:.4}) after epoch {}",
                cfg.mode, b.accuracy, b.macro_f1, b.epoch + 1
            ),
            None => format!("{}: no validation epoch completed", cfg.mode),
        };
        if let Some(r) = &report {
            text.push('\n');
            text.push_str(&r.render_table());
        }
        text
    })
}

fn evaluate_cmd(args: EvaluateArgs, out: Output) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let records = read_corpus(&args.corpus)?;
    let vocab = JointVocabulary::load(&args.vocab)?;
    let lexicon = load_lexicon(args.lexicon.as_deref())?;
    let report = evaluate_checkpoint(&ckpt, &records, &vocab, &lexicon, &args.checkpoint.display().to_string())?;
    if let Some(p) = &args.report {
        report.save(p)?;
    }
    out.emit(&report, || report.render_table())
}

fn study_cmd(args: StudyArgs, seed: Option<u64>, out: Output) -> Result<()> {
    let cfg: StudyConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => StudyConfig::default(),
    };
    let experiments: Vec<Experiment> = if args.experiments.is_empty() {
        vec![Experiment::Joint, Experiment::B2, Experiment::A1]
    } else {
        args.experiments
            .iter()
            .map(|name| {
                Experiment::ALL
                    .into_iter()
                    .find(|e| e.name().eq_ignore_ascii_case(name))
                    .ok_or_else(|| Error::Config(format!("unknown experiment `{name}`")))
            })
            .collect::<Result<_>>()?
    };
    let seed = seed.unwrap_or(1);
    let data = prepare(&cfg, seed)?;
    let (runs, _) = run_experiments(&data, &cfg, seed, &experiments)?;
    let reports: Vec<&EvalReport> = runs.iter().map(|r| &r.report).collect();
    if let Some(dir) = &args.report_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in &reports {
            r.save(dir.join(format!("{}.json", r.meta.checkpoint)))?;
        }
    }
    out.emit(&reports, || {
        runs.iter()
            .map(|r| format!("{}\n{}", r.experiment.name(), r.report.render_table()))
            .collect::<Vec<_>>()
            .join("\n")
    })
}
