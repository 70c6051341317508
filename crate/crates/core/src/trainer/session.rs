//! The training loop shared by pretraining and fine-tuning.
//!
//! Randomness is a pure function of the run seed and the step counter: the
//! epoch order comes from `(seed, epoch)`, a record's mask from
//! `(seed, epoch, record)`, dropout from `(seed, step)`. A session restored
//! from a checkpoint therefore continues exactly where the original left off.

use log::{debug, info};

use crate::batcher::{apply_masking, collate_batch, JointSequence, MaskedRow};
use crate::error::{Error, Result};
use crate::eval::{evaluate_metrics, Metrics};
use crate::model::{argmax_rows, classify_forward, joint_pretrain_loss, LossBreakdown, Model, Objective};
use crate::rng::{derive_seed, rng_from_seed, shuffle};
use crate::tokenizer::JointVocabulary;
use crate::tensor::{adam_step, AdamState, Reduction, Tape};
use crate::trainer::checkpoint::{BestValidation, Checkpoint, Counters, RngState};
use crate::trainer::config::{learning_rate, Layout, RunConfig};
use crate::trainer::data::EncodedRecord;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const MASK_STREAM: u64 = 0x4d41_534b;
const DROPOUT_STREAM: u64 = 0x4452_4f50;
/// Rows per forward pass when predicting.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug)]
enum Task {
    Pretrain(Objective),
    Classify { num_classes: usize },
}

/// What one optimizer step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    /// Pretraining terms; for fine-tuning `total` is the mean batch cross-entropy.
    pub loss: LossBreakdown,
    /// No target in the batch: the parameters were left untouched.
    pub skipped: bool,
}

/// Validation result at the end of an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub validation: Metrics,
}

pub struct Session {
    cfg: RunConfig,
    task: Task,
    train: Vec<JointSequence>,
    labels: Vec<u32>,
    validation: Vec<JointSequence>,
    validation_labels: Vec<u32>,
    vocab: Option<JointVocabulary>,
    model: Model<f32>,
    optimizer: AdamState<f32>,
    counters: Counters,
    best: Option<BestValidation>,
    best_params: Option<crate::tensor::ParamSet<f32>>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

fn sequences(records: &[EncodedRecord], layout: Layout, max_len: usize) -> Result<Vec<JointSequence>> {
    records.iter().map(|r| r.sequence(layout, max_len)).collect()
}

impl Session {
    /// A masked-LM session over `records` starting from `model`.
    pub fn pretrain(records: &[EncodedRecord], vocab: &JointVocabulary, cfg: &RunConfig, model: Model<f32>) -> Result<Session> {
        cfg.validate()?;
        let objective = cfg
            .mode
            .objective()
            .ok_or_else(|| Error::Config(format!("{} is not a pretraining mode", cfg.mode)))?;
        let train = sequences(records, cfg.mode.layout(), cfg.max_len)?;
        if vocab.size() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.size(),
                model.config.vocab_size
            )));
        }
        let mut s = Session::new(cfg, Task::Pretrain(objective), train, Vec::new(), Vec::new(), Vec::new(), model)?;
        s.vocab = Some(vocab.clone());
        Ok(s)
    }

    /// A classification session. The classifier of `model` must already match
    /// the label count.
    pub fn finetune(train: &[EncodedRecord], validation: &[EncodedRecord], cfg: &RunConfig, model: Model<f32>) -> Result<Session> {
        cfg.validate()?;
        if cfg.mode.is_pretrain() {
            return Err(Error::Config(format!("{} is not a fine-tuning mode", cfg.mode)));
        }
        let num_classes = model.config.num_classes;
        let labels = |rs: &[EncodedRecord]| -> Result<Vec<u32>> {
            rs.iter()
                .enumerate()
                .map(|(i, r)| {
                    let l = r.label.ok_or_else(|| Error::MissingField {
                        mode: cfg.mode.as_str().to_string(),
                        field: "label",
                        record: i,
                    })?;
                    if l as usize >= num_classes {
                        return Err(Error::ClassCount {
                            model: num_classes,
                            corpus: l as usize + 1,
                        });
                    }
                    Ok(l)
                })
                .collect()
        };
        let layout = cfg.mode.layout();
        Session::new(
            cfg,
            Task::Classify { num_classes },
            sequences(train, layout, cfg.max_len)?,
            labels(train)?,
            sequences(validation, layout, cfg.max_len)?,
            labels(validation)?,
            model,
        )
    }

    fn new(
        cfg: &RunConfig,
        task: Task,
        train: Vec<JointSequence>,
        labels: Vec<u32>,
        validation: Vec<JointSequence>,
        validation_labels: Vec<u32>,
        model: Model<f32>,
    ) -> Result<Session> {
        if let Some(too_long) = train.iter().chain(&validation).map(JointSequence::len).find(|&n| n > model.config.max_positions) {
            return Err(Error::Config(format!(
                "sequence of {too_long} tokens exceeds max_positions {}",
                model.config.max_positions
            )));
        }
        let bs = cfg.resolved_batch_size() as u64;
        let steps_per_epoch = (train.len() as u64).div_ceil(bs);
        let mut total_steps = steps_per_epoch * cfg.resolved_epochs() as u64;
        if let Some(cap) = cfg.max_steps {
            total_steps = total_steps.min(cap);
        }
        let optimizer = AdamState::new(&model.params, cfg.adam());
        Ok(Session {
            cfg: cfg.clone(),
            task,
            train,
            vocab: None,
            labels,
            validation,
            validation_labels,
            model,
            optimizer,
            counters: Counters {
                step: 0,
                epoch: 0,
                steps_per_epoch,
                total_steps,
            },
            best: None,
            best_params: None,
            steps: Vec::new(),
            epochs: Vec::new(),
        })
    }

    /// Restores optimizer state, counters and best-validation tracking from a
    /// checkpoint written by a session with the same configuration and data.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.model.config != self.model.config {
            return Err(Error::Config("checkpoint model configuration differs from the session's".into()));
        }
        let (c, s) = (ckpt.counters, self.counters);
        if c.steps_per_epoch != s.steps_per_epoch || c.total_steps != s.total_steps || ckpt.rng.seed != self.cfg.seed {
            return Err(Error::Config(
                "checkpoint was written by a run with a different schedule, corpus or seed".into(),
            ));
        }
        self.model = ckpt.model.clone();
        self.optimizer = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        self.counters = c;
        self.best = ckpt.best;
        self.best_params = ckpt.best_params.clone();
        Ok(())
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn is_finished(&self) -> bool {
        self.counters.step >= self.counters.total_steps
    }

    pub fn best(&self) -> Option<BestValidation> {
        self.best
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            counters: self.counters,
            rng: RngState::new(self.cfg.seed),
            best: self.best,
            best_params: self.best_params.clone(),
            run: Some(self.cfg.clone()),
        }
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = rng_from_seed(derive_seed(derive_seed(self.cfg.seed, SHUFFLE_STREAM), epoch));
        shuffle(&mut order, &mut rng);
        order
    }

    /// Runs one optimizer step (plus end-of-epoch validation when due).
    pub fn step(&mut self) -> Result<StepLog> {
        if self.is_finished() {
            return Err(Error::Config("training schedule already complete".into()));
        }
        let Counters {
            step,
            steps_per_epoch,
            total_steps,
            ..
        } = self.counters;
        let epoch = step / steps_per_epoch;
        let in_epoch = (step % steps_per_epoch) as usize;
        let bs = self.cfg.resolved_batch_size();
        let order = self.epoch_order(epoch);
        let batch: Vec<usize> = order[in_epoch * bs..((in_epoch + 1) * bs).min(order.len())].to_vec();
        let lr = learning_rate(step, total_steps, self.cfg.resolved_lr(), self.cfg.warmup_fraction);
        let mut dropout_rng = rng_from_seed(derive_seed(derive_seed(self.cfg.seed, DROPOUT_STREAM), step));
        let mut rng = Some(&mut dropout_rng);

        let (loss, grads) = {
            let mut tape = Tape::new(&self.model.params);
            let cfg = &self.model.config;
            match self.task {
                Task::Pretrain(objective) => {
                    let rows = self.masked_rows(&batch, epoch);
                    match joint_pretrain_loss(&mut tape, cfg, &rows, objective, &mut rng)? {
                        None => (LossBreakdown::default(), None),
                        Some(l) => (l.breakdown, Some(tape.backward(l.total)?)),
                    }
                }
                Task::Classify { .. } => {
                    let rows: Vec<MaskedRow> = batch.iter().map(|&i| MaskedRow::unmasked(&self.train[i])).collect();
                    let b = collate_batch(&rows)?;
                    let logits = classify_forward(&mut tape, cfg, (&b).into(), &mut rng)?;
                    let targets: Vec<usize> = batch.iter().map(|&i| self.labels[i] as usize).collect();
                    let l = tape.cross_entropy(logits, &targets, Reduction::Mean)?;
                    let v = tape.value(l).item() as f64;
                    (LossBreakdown::from_terms(v, 0.0, 0.0), Some(tape.backward(l)?))
                }
            }
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let skipped = grads.is_none();
        if let Some(g) = &grads {
            adam_step(&mut self.model.params, g, &mut self.optimizer, lr)?;
        }
        self.counters.step += 1;
        let log = StepLog {
            step,
            lr,
            loss,
            skipped,
        };
        debug!("step {step} lr {lr:.3e} loss {:.4}", loss.total);
        self.steps.push(log);
        let epoch_done = self.counters.step.is_multiple_of(steps_per_epoch) || self.counters.step == total_steps;
        if epoch_done {
            self.counters.epoch = epoch + 1;
            self.end_epoch(epoch)?;
        }
        Ok(log)
    }

    fn masked_rows(&self, batch: &[usize], epoch: u64) -> Vec<MaskedRow> {
        let stream = derive_seed(derive_seed(self.cfg.seed, MASK_STREAM), epoch);
        batch
            .iter()
            .map(|&i| apply_masking(&self.train[i], self.vocab(), self.cfg.mask_prob, derive_seed(stream, i as u64)))
            .collect()
    }

    fn vocab(&self) -> &JointVocabulary {
        self.vocab.as_ref().expect("pretraining sessions carry a vocabulary")
    }

    fn end_epoch(&mut self, epoch: u64) -> Result<()> {
        let Task::Classify { num_classes } = self.task else {
            let recent: Vec<f64> = self.steps.iter().rev().take(self.counters.steps_per_epoch as usize).map(|s| s.loss.total).collect();
            let mean = recent.iter().sum::<f64>() / recent.len().max(1) as f64;
            info!("epoch {} done: mean loss {mean:.4}", epoch + 1);
            return Ok(());
        };
        if self.validation.is_empty() {
            return Ok(());
        }
        let preds = predict_sequences(&self.model, &self.validation)?;
        let m = evaluate_metrics(&preds, &self.validation_labels, num_classes)?;
        info!("epoch {}: validation accuracy / macro-F1 {m}", epoch + 1);
        self.epochs.push(EpochLog {
            epoch,
            validation: m,
        });
        let cand = BestValidation {
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            epoch,
        };
        if self.best.is_none_or(|b| cand.improves_on(&b)) {
            self.best = Some(cand);
            self.best_params = Some(self.model.params.clone());
        }
        Ok(())
    }

    /// Runs up to `n` steps; returns their logs.
    pub fn run_steps(&mut self, n: u64) -> Result<Vec<StepLog>> {
        let mut out = Vec::new();
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            out.push(self.step()?);
            self.maybe_save()?;
        }
        Ok(out)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
            self.maybe_save()?;
        }
        Ok(())
    }

    fn maybe_save(&self) -> Result<()> {
        let every = self.cfg.checkpoint_every;
        if let (Some(dir), true) = (&self.cfg.checkpoint_dir, every > 0 && self.counters.step.is_multiple_of(every)) {
            let path = dir.join(format!("step-{:06}.pbrt", self.counters.step));
            self.checkpoint().save(&path)?;
            info!("saved {}", path.display());
        }
        Ok(())
    }

    /// Final checkpoint. Fine-tuning runs return the weights of the best
    /// validation epoch (the last weights when there was no validation data).
    pub fn finish(self) -> Checkpoint {
        let mut ckpt = self.checkpoint();
        if let Some(best) = ckpt.best_params.take() {
            ckpt.model.params = best;
        }
        ckpt
    }
}

/// Argmax predictions over `seqs` in evaluation mode.
pub fn predict_sequences(model: &Model<f32>, seqs: &[JointSequence]) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let rows: Vec<MaskedRow> = chunk.iter().map(MaskedRow::unmasked).collect();
        let b = collate_batch(&rows)?;
        let mut tape = Tape::new(&model.params);
        let logits = classify_forward(&mut tape, &model.config, (&b).into(), &mut None)?;
        out.extend(argmax_rows(tape.value(logits)));
    }
    Ok(out)
}
