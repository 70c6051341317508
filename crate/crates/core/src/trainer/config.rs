use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Objective};
use crate::tensor::AdamConfig;

/// Every training configuration the toolkit runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Word-only masked LM on the ASR transcript.
    PretrainWordOnly,
    /// Three-term joint masked LM on the transcript and the independent phoneme sequence.
    PretrainJoint,
    /// Word and phoneme terms without the joint term.
    PretrainJointNoJointLoss,
    /// Joint masked LM with phonemes derived from the ASR transcript by G2P.
    PretrainJointG2pOnAsr,
    FinetuneJoint,
    FinetuneWordOnly,
    FinetunePhonemeOnly,
    /// Word-only fine-tuning on the clean reference text.
    FinetuneClean,
}

/// Which blocks a fine-tuning input row carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Joint,
    WordOnly,
    PhonemeOnly,
}

/// Origin of the phoneme block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhonemeSource {
    /// The corpus `phoneme` field (independent recognizer output).
    #[default]
    Independent,
    /// Lexicon G2P applied to the ASR transcript.
    G2pOnAsr,
}

impl RunMode {
    pub const ALL: [RunMode; 8] = [
        RunMode::PretrainWordOnly,
        RunMode::PretrainJoint,
        RunMode::PretrainJointNoJointLoss,
        RunMode::PretrainJointG2pOnAsr,
        RunMode::FinetuneJoint,
        RunMode::FinetuneWordOnly,
        RunMode::FinetunePhonemeOnly,
        RunMode::FinetuneClean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::PretrainWordOnly => "pretrain_word_only",
            RunMode::PretrainJoint => "pretrain_joint",
            RunMode::PretrainJointNoJointLoss => "pretrain_joint_no_joint_loss",
            RunMode::PretrainJointG2pOnAsr => "pretrain_joint_g2p_on_asr",
            RunMode::FinetuneJoint => "finetune_joint",
            RunMode::FinetuneWordOnly => "finetune_word_only",
            RunMode::FinetunePhonemeOnly => "finetune_phoneme_only",
            RunMode::FinetuneClean => "finetune_clean",
        }
    }

    pub fn is_pretrain(self) -> bool {
        self.objective().is_some()
    }

    /// Pretraining objective; `None` for fine-tuning modes.
    pub fn objective(self) -> Option<Objective> {
        match self {
            RunMode::PretrainWordOnly => Some(Objective::WordOnly),
            RunMode::PretrainJoint | RunMode::PretrainJointG2pOnAsr => Some(Objective::Joint),
            RunMode::PretrainJointNoJointLoss => Some(Objective::NoJoint),
            _ => None,
        }
    }

    /// Input layout of the rows this mode trains on.
    pub fn layout(self) -> Layout {
        match self {
            RunMode::PretrainWordOnly | RunMode::FinetuneWordOnly | RunMode::FinetuneClean => Layout::WordOnly,
            RunMode::FinetunePhonemeOnly => Layout::PhonemeOnly,
            _ => Layout::Joint,
        }
    }

    /// Whether word tokens come from the clean text instead of the transcript.
    pub fn uses_clean_text(self) -> bool {
        self == RunMode::FinetuneClean
    }

    /// Phoneme origin, given the configured source for fine-tuning modes.
    pub fn phoneme_source(self, configured: PhonemeSource) -> Option<PhonemeSource> {
        match self {
            RunMode::PretrainJointG2pOnAsr => Some(PhonemeSource::G2pOnAsr),
            RunMode::PretrainJoint | RunMode::PretrainJointNoJointLoss => Some(PhonemeSource::Independent),
            RunMode::FinetuneJoint | RunMode::FinetunePhonemeOnly => Some(configured),
            _ => None,
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<RunMode> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown run mode `{s}`")))
    }
}

/// The baseline and ablation rows of the comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    /// Fine-tuned and tested on clean text.
    Oracle,
    /// No pretraining; word-only fine-tuning on transcripts.
    B1,
    /// Word-only pretraining on transcripts.
    B2,
    /// Joint pretraining with G2P phonemes of the transcript.
    B3,
    /// Joint pretraining, joint fine-tuning.
    Joint,
    /// Joint pretraining, word-only fine-tuning.
    A1,
    /// Joint pretraining, phoneme-only fine-tuning.
    A2,
    /// Pretraining without the joint term, joint fine-tuning.
    A3,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::Oracle,
        Experiment::B1,
        Experiment::B2,
        Experiment::B3,
        Experiment::Joint,
        Experiment::A1,
        Experiment::A2,
        Experiment::A3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Oracle => "Oracle",
            Experiment::B1 => "B1",
            Experiment::B2 => "B2",
            Experiment::B3 => "B3",
            Experiment::Joint => "Joint",
            Experiment::A1 => "A1",
            Experiment::A2 => "A2",
            Experiment::A3 => "A3",
        }
    }

    /// Pretraining mode, if the row pretrains.
    pub fn pretrain_mode(self) -> Option<RunMode> {
        match self {
            Experiment::Oracle | Experiment::B1 => None,
            Experiment::B2 => Some(RunMode::PretrainWordOnly),
            Experiment::B3 => Some(RunMode::PretrainJointG2pOnAsr),
            Experiment::Joint | Experiment::A1 | Experiment::A2 => Some(RunMode::PretrainJoint),
            Experiment::A3 => Some(RunMode::PretrainJointNoJointLoss),
        }
    }

    pub fn finetune_mode(self) -> RunMode {
        match self {
            Experiment::Oracle => RunMode::FinetuneClean,
            Experiment::B1 | Experiment::B2 | Experiment::A1 => RunMode::FinetuneWordOnly,
            Experiment::B3 | Experiment::Joint | Experiment::A3 => RunMode::FinetuneJoint,
            Experiment::A2 => RunMode::FinetunePhonemeOnly,
        }
    }

    pub fn finetune_phoneme_source(self) -> PhonemeSource {
        if self == Experiment::B3 {
            PhonemeSource::G2pOnAsr
        } else {
            PhonemeSource::Independent
        }
    }

    /// The (pretraining, fine-tuning) configurations of this row, derived from `base`.
    pub fn run_configs(self, base: &RunConfig) -> (Option<RunConfig>, RunConfig) {
        let pre = self.pretrain_mode().map(|mode| RunConfig {
            mode,
            ..base.clone()
        });
        let fine = RunConfig {
            mode: self.finetune_mode(),
            phoneme_source: self.finetune_phoneme_source(),
            ..base.clone()
        };
        (pre, fine)
    }
}

/// Settings of one pretraining or fine-tuning run. Unset optional fields take
/// mode-dependent defaults (see the `resolved_*` accessors).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: RunMode,
    pub epochs: Option<usize>,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    pub lr: Option<f64>,
    /// Share of the steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Validation share of the training set when no validation corpus is given.
    pub val_fraction: f64,
    pub seed: u64,
    pub mask_prob: f64,
    /// Longest assembled input sequence.
    pub max_len: usize,
    pub phoneme_source: PhonemeSource,
    /// Classifier size; inferred from the labels when unset.
    pub num_classes: Option<usize>,
    /// Architecture for runs that start without a checkpoint.
    pub model: ModelConfig,
    pub checkpoint_dir: Option<PathBuf>,
    /// Save a checkpoint every this many steps (0 disables periodic saves).
    pub checkpoint_every: u64,
    pub corpus: Option<PathBuf>,
    pub validation_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        RunConfig {
            mode: RunMode::PretrainJoint,
            epochs: None,
            max_steps: None,
            batch_size: None,
            lr: None,
            warmup_fraction: 0.1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            val_fraction: 0.2,
            seed: 0,
            mask_prob: crate::batcher::MASK_PROB,
            max_len: 128,
            phoneme_source: PhonemeSource::Independent,
            num_classes: None,
            model: ModelConfig::default(),
            checkpoint_dir: None,
            checkpoint_every: 0,
            corpus: None,
            validation_corpus: None,
            test_corpus: None,
            vocab: None,
            lexicon: None,
            init_checkpoint: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn new(mode: RunMode) -> RunConfig {
        RunConfig {
            mode,
            ..RunConfig::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// 50 epochs for pretraining and 20 for fine-tuning unless set.
    pub fn resolved_epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.mode.is_pretrain() { 50 } else { 20 })
    }

    /// 192 for pretraining and 32 for fine-tuning unless set.
    pub fn resolved_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.mode.is_pretrain() { 192 } else { 32 })
    }

    /// 3e-4 for pretraining and 3e-5 for fine-tuning unless set.
    pub fn resolved_lr(&self) -> f64 {
        self.lr.unwrap_or(if self.mode.is_pretrain() { 3e-4 } else { 3e-5 })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.resolved_lr(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.resolved_batch_size() == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return fail(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        let lr = self.resolved_lr();
        if !(lr.is_finite() && lr > 0.0) {
            return fail(format!("learning rate {lr} must be positive"));
        }
        if self.max_len < 4 {
            return fail(format!("max_len {} cannot hold the special tokens", self.max_len));
        }
        if self.num_classes == Some(0) {
            return fail("num_classes must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup over `warmup_fraction` of `total` steps, then linear decay;
/// `step` counts from 0 and the last step still has a positive rate.
pub fn learning_rate(step: u64, total: u64, peak: f64, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let warmup = ((total as f64 * warmup_fraction).ceil() as u64).min(total);
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        peak * (total - step.min(total - 1)) as f64 / (total - warmup).max(1) as f64
    }
}
