//! Controlled comparison of pretraining setups on a synthetic corpus.
//!
//! Each clean sentence hides one class keyword among frequent filler words, so
//! the label is a function of the clean text. The word channel replaces words
//! by phonetically nearest lexicon neighbours, deletes and inserts words; the
//! phoneme channel corrupts the clean pronunciation independently. A keyword
//! lost from the transcript is therefore often still recoverable from the
//! phoneme sequence, which is what joint pretraining can learn to exploit.

use std::collections::HashMap;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_corpus, ConfusionClasses, CorpusRecord, CorpusStats, Lexicon, NoiseConfig, SyntheticTask};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::tokenizer::{build_joint_vocab, train_bpe, BpeMode, JointVocabulary};
use crate::trainer::{finetune, pretrain, Checkpoint, Experiment, RunConfig, RunMode};

const SOURCE_STREAM: u64 = 0x5352_4345;

/// Sizes and training budgets of the synthetic study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub num_fillers: usize,
    /// Source sentences fed to the corpus builder; the WER filter rejects many.
    pub source_sentences: usize,
    /// Records kept after filtering.
    pub corpus_size: usize,
    /// Leading records used (without labels) for vocabulary and pretraining.
    pub pretrain_records: usize,
    /// Leading records used for fine-tuning (a subset of the pretraining records).
    pub finetune_records: usize,
    /// Trailing records held out for testing.
    pub test_records: usize,
    pub word_merges: usize,
    pub phoneme_merges: usize,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_len: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub noise: NoiseConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            num_classes: 4,
            keywords_per_class: 4,
            num_fillers: 200,
            source_sentences: 100_000,
            corpus_size: 5000,
            pretrain_records: 3500,
            finetune_records: 1000,
            test_records: 1500,
            word_merges: 3000,
            phoneme_merges: 200,
            model: ModelConfig {
                hidden_dim: 64,
                num_layers: 2,
                num_heads: 2,
                ffn_dim: 128,
                max_positions: 128,
                dropout_rate: 0.1,
                ..ModelConfig::default()
            },
            batch_size: 32,
            max_len: 128,
            pretrain_epochs: 10,
            pretrain_lr: 3e-4,
            finetune_epochs: 30,
            finetune_lr: 5e-4,
            noise: NoiseConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_records + self.test_records > self.corpus_size {
            return Err(Error::Config(format!(
                "{} pretraining and {} test records do not fit a {}-record corpus",
                self.pretrain_records, self.test_records, self.corpus_size
            )));
        }
        if self.finetune_records > self.pretrain_records || self.finetune_records == 0 || self.test_records == 0 {
            return Err(Error::Config(
                "fine-tuning records must be a non-empty prefix of the pretraining records, and the test set non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Base run configuration shared by every pretraining and fine-tuning run.
    pub fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            model: self.model.clone(),
            batch_size: Some(self.batch_size),
            max_len: self.max_len,
            ..RunConfig::default()
        }
    }
}

/// Corpus splits and vocabulary of one study seed.
pub struct StudyData {
    pub task: SyntheticTask,
    pub lexicon: Lexicon,
    pub vocab: JointVocabulary,
    pub stats: CorpusStats,
    pub pretrain: Vec<CorpusRecord>,
    pub finetune: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

/// Builds the noisy corpus, its splits and a BPE vocabulary from the
/// pretraining split.
pub fn prepare(cfg: &StudyConfig, seed: u64) -> Result<StudyData> {
    cfg.validate()?;
    let lexicon = Lexicon::builtin();
    let classes = ConfusionClasses::builtin();
    let task = SyntheticTask::from_lexicon(&lexicon, cfg.num_classes, cfg.keywords_per_class, cfg.num_fillers);
    let sources = task.generate(cfg.source_sentences, derive_seed(seed, SOURCE_STREAM));
    let noise = NoiseConfig {
        seed,
        ..cfg.noise.clone()
    };
    let (mut records, stats) = build_corpus(&sources, &noise, &lexicon, &classes)?;
    if records.len() < cfg.corpus_size {
        return Err(Error::Config(format!(
            "only {} of {} source sentences passed the WER filter; {} needed",
            records.len(),
            cfg.source_sentences,
            cfg.corpus_size
        )));
    }
    records.truncate(cfg.corpus_size);
    let test = records.split_off(cfg.corpus_size - cfg.test_records);
    let pretrain: Vec<CorpusRecord> = records[..cfg.pretrain_records].to_vec();
    let finetune = pretrain[..cfg.finetune_records].to_vec();
    let words: Vec<&str> = pretrain
        .iter()
        .flat_map(|r| [r.asr.as_deref().unwrap_or_default(), r.clean.as_str()])
        .collect();
    let phonemes: Vec<&str> = pretrain.iter().filter_map(|r| r.phoneme.as_deref()).collect();
    let vocab = build_joint_vocab(
        train_bpe(&words, cfg.word_merges, BpeMode::Word)?,
        train_bpe(&phonemes, cfg.phoneme_merges, BpeMode::Phoneme)?,
    )?;
    info!(
        "study corpus: {} records, mean WER {:.4}, vocabulary {}",
        cfg.corpus_size,
        stats.mean_wer,
        vocab.size()
    );
    Ok(StudyData {
        task,
        lexicon,
        vocab,
        stats,
        pretrain,
        finetune,
        test,
    })
}

/// Test-set outcome of one experiment row.
pub struct StudyRun {
    pub experiment: Experiment,
    pub report: EvalReport,
    /// Wall-clock seconds of the row's own fine-tuning (pretraining is shared).
    pub finetune_seconds: f64,
}

/// Pretraining run of a study, reused by every row with the same mode.
pub struct StudyPretrain {
    pub mode: RunMode,
    pub checkpoint: Checkpoint,
    pub seconds: f64,
}

/// Runs `experiments` with equal budgets: every pretraining run gets the same
/// epochs and learning rate, as does every fine-tuning run.
pub fn run_experiments(data: &StudyData, cfg: &StudyConfig, seed: u64, experiments: &[Experiment]) -> Result<(Vec<StudyRun>, Vec<StudyPretrain>)> {
    let base = cfg.run_config(seed);
    let mut pretrained: HashMap<RunMode, StudyPretrain> = HashMap::new();
    let mut order = Vec::new();
    let mut runs = Vec::with_capacity(experiments.len());
    for &exp in experiments {
        let (pre_cfg, mut ft_cfg) = exp.run_configs(&base);
        if let Some(mut pre_cfg) = pre_cfg {
            if let std::collections::hash_map::Entry::Vacant(e) = pretrained.entry(pre_cfg.mode) {
                pre_cfg.epochs = Some(cfg.pretrain_epochs);
                pre_cfg.lr = Some(cfg.pretrain_lr);
                let t = Instant::now();
                let out = pretrain(&data.pretrain, &data.vocab, &data.lexicon, &pre_cfg, None)?;
                let seconds = t.elapsed().as_secs_f64();
                info!("{}: pretrained in {seconds:.1}s", pre_cfg.mode);
                order.push(pre_cfg.mode);
                e.insert(StudyPretrain {
                        mode: pre_cfg.mode,
                        checkpoint: out.checkpoint,
                        seconds,
                    });
            }
        }
        let init = exp.pretrain_mode().map(|m| &pretrained[&m].checkpoint);
        ft_cfg.epochs = Some(cfg.finetune_epochs);
        ft_cfg.lr = Some(cfg.finetune_lr);
        let t = Instant::now();
        let out = finetune(init, &data.finetune, None, Some(&data.test), &data.vocab, &data.lexicon, &ft_cfg)?;
        let mut report = out
            .test
            .ok_or_else(|| Error::Config("fine-tuning returned no test report".into()))?;
        report.meta.checkpoint = exp.name().to_string();
        let finetune_seconds = t.elapsed().as_secs_f64();
        info!("{}: test {}", exp.name(), crate::trainer::report_metrics(&report));
        runs.push(StudyRun {
            experiment: exp,
            report,
            finetune_seconds,
        });
    }
    let pretrains = order.into_iter().filter_map(|m| pretrained.remove(&m)).collect();
    Ok((runs, pretrains))
}
