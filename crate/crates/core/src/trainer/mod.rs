//! Pretraining and fine-tuning runs, checkpoints and checkpoint evaluation.

mod checkpoint;
mod config;
mod data;
mod session;

pub use checkpoint::{BestValidation, Checkpoint, Counters, RngState, FORMAT_VERSION, MAGIC};
pub use config::{learning_rate, Experiment, Layout, PhonemeSource, RunConfig, RunMode};
pub use data::{encode_records, label_class_count, EncodedRecord};
pub use session::{predict_sequences, EpochLog, Session, StepLog, EVAL_BATCH};

use log::info;

use crate::corpus::{CorpusRecord, Lexicon};
use crate::error::{Error, Result};
use crate::eval::{wer_bucket_report, EvalReport, Metrics, ReportMeta, ScoredRecord};
use crate::model::{Model, ModelConfig};
use crate::rng::{derive_seed, rng_from_seed, shuffle};
use crate::tokenizer::JointVocabulary;

const SPLIT_STREAM: u64 = 0x5350_4c54;
const HEAD_STREAM: u64 = 0x4845_4144;

/// Result of a pretraining run.
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepLog>,
}

/// Result of a fine-tuning run.
pub struct FinetuneOutcome {
    /// Weights of the best validation epoch.
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// Test-set report when a test corpus was supplied.
    pub test: Option<EvalReport>,
}

/// Starting weights: the given model, or a fresh one sized to the vocabulary.
fn initial_model(init: Option<&Checkpoint>, vocab: &JointVocabulary, cfg: &RunConfig) -> Result<Model<f32>> {
    match init {
        Some(ckpt) => {
            if ckpt.model.config.vocab_size != vocab.size() {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary has {} tokens, vocabulary file has {}",
                    ckpt.model.config.vocab_size,
                    vocab.size()
                )));
            }
            Ok(ckpt.model.clone())
        }
        None => Model::new(ModelConfig {
            vocab_size: vocab.size(),
            seed: cfg.seed,
            num_classes: 0,
            ..cfg.model.clone()
        }),
    }
}

/// Masked-LM pretraining from `init` (or from scratch).
pub fn pretrain(records: &[CorpusRecord], vocab: &JointVocabulary, lexicon: &Lexicon, cfg: &RunConfig, init: Option<&Checkpoint>) -> Result<PretrainOutcome> {
    let data = encode_records(records, vocab, lexicon, cfg.mode, cfg.phoneme_source, false)?;
    let model = initial_model(init, vocab, cfg)?;
    let mut session = Session::pretrain(&data, vocab, cfg, model)?;
    info!(
        "{}: {} records, {} steps",
        cfg.mode,
        data.len(),
        session.counters().total_steps
    );
    session.run()?;
    let steps = std::mem::take(&mut session.steps);
    let checkpoint = session.finish();
    if let Some(path) = &cfg.output {
        checkpoint.save(path)?;
    }
    Ok(PretrainOutcome { checkpoint, steps })
}

/// Shuffles under the run seed and keeps the last `val_fraction` as validation.
pub fn split_validation<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    shuffle(&mut order, &mut rng_from_seed(derive_seed(seed, SPLIT_STREAM)));
    let n_val = ((items.len() as f64) * val_fraction).round() as usize;
    let n_train = items.len() - n_val.min(items.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    (pick(&order[..n_train]), pick(&order[n_train..]))
}

/// Fine-tunes a freshly initialized classification head (and the encoder)
/// and keeps the best validation epoch. Without `validation` records, the
/// last `val_fraction` of the shuffled training set is held out.
pub fn finetune(
    init: Option<&Checkpoint>,
    train: &[CorpusRecord],
    validation: Option<&[CorpusRecord]>,
    test: Option<&[CorpusRecord]>,
    vocab: &JointVocabulary,
    lexicon: &Lexicon,
    cfg: &RunConfig,
) -> Result<FinetuneOutcome> {
    let encode = |rs: &[CorpusRecord]| encode_records(rs, vocab, lexicon, cfg.mode, cfg.phoneme_source, true);
    let all = encode(train)?;
    let (train_set, val_set) = match validation {
        Some(v) => (all, encode(v)?),
        None => split_validation(&all, cfg.val_fraction, cfg.seed),
    };
    let implied = label_class_count(&train_set).max(label_class_count(&val_set));
    let num_classes = match cfg.num_classes {
        Some(n) if n < implied => return Err(Error::ClassCount { model: n, corpus: implied }),
        Some(n) => n,
        None => implied,
    };
    let mut model = initial_model(init, vocab, cfg)?;
    model.reset_classifier(num_classes, derive_seed(cfg.seed, HEAD_STREAM))?;
    let mut session = Session::finetune(&train_set, &val_set, cfg, model)?;
    info!(
        "{}: {} train / {} validation records, {} classes, {} steps",
        cfg.mode,
        train_set.len(),
        val_set.len(),
        num_classes,
        session.counters().total_steps
    );
    session.run()?;
    let steps = std::mem::take(&mut session.steps);
    let epochs = std::mem::take(&mut session.epochs);
    let checkpoint = session.finish();
    let test = match test {
        Some(t) => Some(evaluate_checkpoint(&checkpoint, t, vocab, lexicon, "")?),
        None => None,
    };
    if let Some(path) = &cfg.output {
        checkpoint.save(path)?;
    }
    Ok(FinetuneOutcome {
        checkpoint,
        steps,
        epochs,
        test,
    })
}

/// Predictions of a fine-tuned checkpoint on `records`, using the layout and
/// phoneme source of the run that produced it.
pub fn predict_records(ckpt: &Checkpoint, records: &[CorpusRecord], vocab: &JointVocabulary, lexicon: &Lexicon) -> Result<Vec<u32>> {
    let run = ckpt
        .run
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint does not record the run that produced it".into()))?;
    if run.mode.is_pretrain() || ckpt.model.config.num_classes == 0 {
        return Err(Error::Config("checkpoint has no fine-tuned classification head".into()));
    }
    if ckpt.model.config.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary has {} tokens, vocabulary file has {}",
            ckpt.model.config.vocab_size,
            vocab.size()
        )));
    }
    let data = encode_records(records, vocab, lexicon, run.mode, run.phoneme_source, false)?;
    let seqs = data
        .iter()
        .map(|r| r.sequence(run.mode.layout(), run.max_len))
        .collect::<Result<Vec<_>>>()?;
    predict_sequences(&ckpt.model, &seqs)
}

/// Accuracy, macro-F1 and the WER-bucket breakdown of a fine-tuned checkpoint.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, records: &[CorpusRecord], vocab: &JointVocabulary, lexicon: &Lexicon, checkpoint_id: &str) -> Result<EvalReport> {
    let num_classes = ckpt.model.config.num_classes;
    let mut gold = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let mode = ckpt.run.as_ref().map_or("evaluate".to_string(), |c| c.mode.to_string());
        let l = r.label.ok_or(Error::MissingField {
            mode,
            field: "label",
            record: i,
        })?;
        gold.push(l);
    }
    let implied = gold.iter().max().map_or(0, |&m| m as usize + 1);
    if implied > num_classes {
        return Err(Error::ClassCount {
            model: num_classes,
            corpus: implied,
        });
    }
    let preds = predict_records(ckpt, records, vocab, lexicon)?;
    let scored: Vec<ScoredRecord> = records
        .iter()
        .zip(preds.iter().zip(&gold))
        .map(|(r, (&prediction, &gold))| ScoredRecord {
            wer: r.wer,
            prediction,
            gold,
        })
        .collect();
    let meta = ReportMeta {
        mode: ckpt.run.as_ref().map_or(String::new(), |c| c.mode.to_string()),
        checkpoint: checkpoint_id.to_string(),
        seed: ckpt.rng.seed,
    };
    wer_bucket_report(&scored, num_classes, meta)
}

/// Overall metrics of an evaluation report.
pub fn report_metrics(report: &EvalReport) -> Metrics {
    Metrics {
        accuracy: report.overall.accuracy,
        macro_f1: report.overall.macro_f1,
    }
}
