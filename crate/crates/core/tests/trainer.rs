//! Training loop, checkpoints, resume and run-mode wiring.

use phonolm::corpus::{build_corpus, ConfusionClasses, CorpusRecord, Lexicon, NoiseConfig, SyntheticTask};
use phonolm::model::{Model, ModelConfig};
use phonolm::tokenizer::{build_joint_vocab, train_bpe, BpeMode, JointVocabulary};
use phonolm::trainer::{
    encode_records, evaluate_checkpoint, finetune, predict_records, pretrain, Checkpoint, Experiment, PhonemeSource, RunConfig, RunMode, Session,
    FORMAT_VERSION,
};
use phonolm::Error;

struct Fixture {
    lexicon: Lexicon,
    vocab: JointVocabulary,
    records: Vec<CorpusRecord>,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    let lexicon = Lexicon::builtin();
    let task = SyntheticTask::from_lexicon(&lexicon, 4, 3, 60);
    let sources = task.generate(n * 25, seed);
    let noise = NoiseConfig {
        seed,
        pilot_size: 200,
        ..NoiseConfig::default()
    };
    let (mut records, _) = build_corpus(&sources, &noise, &lexicon, &ConfusionClasses::builtin()).unwrap();
    assert!(records.len() >= n, "only {} records", records.len());
    records.truncate(n);
    let words: Vec<&str> = records.iter().flat_map(|r| [r.asr.as_deref().unwrap(), r.clean.as_str()]).collect();
    let phones: Vec<&str> = records.iter().map(|r| r.phoneme.as_deref().unwrap()).collect();
    let vocab = build_joint_vocab(
        train_bpe(&words, 300, BpeMode::Word).unwrap(),
        train_bpe(&phones, 100, BpeMode::Phoneme).unwrap(),
    )
    .unwrap();
    Fixture { lexicon, vocab, records }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 32,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 64,
        max_positions: 128,
        ..ModelConfig::default()
    }
}

fn run_config(mode: RunMode, epochs: usize, lr: f64) -> RunConfig {
    RunConfig {
        mode,
        epochs: Some(epochs),
        batch_size: Some(16),
        lr: Some(lr),
        seed: 9,
        model: tiny_model(),
        ..RunConfig::default()
    }
}

#[test]
fn zero_epochs_return_the_initial_weights() {
    let f = fixture(60, 1);
    let cfg = run_config(RunMode::PretrainJoint, 0, 1e-3);
    let out = pretrain(&f.records, &f.vocab, &f.lexicon, &cfg, None).unwrap();
    assert!(out.steps.is_empty());
    let init = Model::<f32>::new(ModelConfig {
        vocab_size: f.vocab.size(),
        seed: cfg.seed,
        ..tiny_model()
    })
    .unwrap();
    assert!(out.checkpoint.model.params.bitwise_eq(&init.params));
}

#[test]
fn pretraining_loss_decreases() {
    let f = fixture(500, 2);
    let cfg = RunConfig {
        max_steps: Some(200),
        ..run_config(RunMode::PretrainJoint, 100, 1e-3)
    };
    let out = pretrain(&f.records, &f.vocab, &f.lexicon, &cfg, None).unwrap();
    assert_eq!(out.steps.len(), 200);
    let mean = |steps: &[phonolm::trainer::StepLog]| steps.iter().map(|s| s.loss.total).sum::<f64>() / steps.len() as f64;
    let (head, tail) = (mean(&out.steps[..10]), mean(&out.steps[190..]));
    assert!(tail < head, "total loss {head:.3} -> {tail:.3}");
}

fn resume_matches(mode: RunMode, total: u64, split: u64) {
    let f = fixture(120, 3);
    let cfg = RunConfig {
        max_steps: Some(total),
        ..run_config(mode, 10, 1e-3)
    };
    let data = encode_records(&f.records, &f.vocab, &f.lexicon, mode, cfg.phoneme_source, !mode.is_pretrain()).unwrap();
    let model = || {
        let mut m = Model::<f32>::new(ModelConfig {
            vocab_size: f.vocab.size(),
            seed: cfg.seed,
            ..tiny_model()
        })
        .unwrap();
        if !mode.is_pretrain() {
            m.reset_classifier(4, 77).unwrap();
        }
        m
    };
    let session = |m| {
        if mode.is_pretrain() {
            Session::pretrain(&data, &f.vocab, &cfg, m).unwrap()
        } else {
            Session::finetune(&data[..90], &data[90..], &cfg, m).unwrap()
        }
    };
    let mut straight = session(model());
    straight.run_steps(total).unwrap();

    let mut first = session(model());
    first.run_steps(split).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    drop(first);
    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    let mut second = session(model());
    second.restore(&restored).unwrap();
    second.run_steps(total - split).unwrap();

    assert!(second.is_finished() && straight.is_finished());
    assert!(straight.checkpoint().bitwise_eq(&second.checkpoint()));
}

#[test]
fn resumed_pretraining_is_bitwise_identical() {
    resume_matches(RunMode::PretrainJoint, 20, 10);
}

#[test]
fn resumed_finetuning_is_bitwise_identical() {
    // 90 records in batches of 16 give 6 steps per epoch; the split falls
    // mid-epoch and the run crosses two validation points.
    resume_matches(RunMode::FinetuneJoint, 20, 9);
}

#[test]
fn same_seed_gives_identical_runs() {
    let f = fixture(150, 4);
    let cfg = RunConfig {
        max_steps: Some(30),
        ..run_config(RunMode::FinetuneJoint, 5, 1e-3)
    };
    let a = finetune(None, &f.records[..100], None, Some(&f.records[100..]), &f.vocab, &f.lexicon, &cfg).unwrap();
    let b = finetune(None, &f.records[..100], None, Some(&f.records[100..]), &f.vocab, &f.lexicon, &cfg).unwrap();
    assert!(a.checkpoint.bitwise_eq(&b.checkpoint));
    assert_eq!(a.test.unwrap().to_json().unwrap(), b.test.unwrap().to_json().unwrap());
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let f = fixture(60, 5);
    let cfg = RunConfig {
        max_steps: Some(3),
        ..run_config(RunMode::FinetuneJoint, 1, 1e-3)
    };
    let out = finetune(None, &f.records, None, None, &f.vocab, &f.lexicon, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.pbrt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert!(loaded.bitwise_eq(&out.checkpoint));
    assert_eq!(loaded.run.as_ref().unwrap().mode, RunMode::FinetuneJoint);

    let bytes = out.checkpoint.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"PBRT");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);

    let mut wrong_version = bytes.clone();
    wrong_version[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::CheckpointVersion { found, .. }) if found == FORMAT_VERSION + 1));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::CheckpointCorrupt(_)), "cut {cut}: {err}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::CheckpointCorrupt(_))));

    // Rewrite the header so the configuration no longer matches the tensors.
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
    header["model_config"]["ffn_dim"] = serde_json::json!(48);
    let new_header = serde_json::to_vec(&header).unwrap();
    let mut reshaped = bytes[..8].to_vec();
    reshaped.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
    reshaped.extend_from_slice(&new_header);
    reshaped.extend_from_slice(&bytes[12 + header_len..]);
    let err = Checkpoint::from_bytes(&reshaped).unwrap_err();
    assert!(matches!(&err, Error::CheckpointShape { name, .. } if name.contains("ffn")), "{err}");
    assert_eq!(err.exit_code(), 8);
}

#[test]
fn every_mode_round_trips_and_experiments_wire_their_modes() {
    for mode in RunMode::ALL {
        assert_eq!(mode.as_str().parse::<RunMode>().unwrap(), mode);
        let json = serde_json::to_string(&mode).unwrap();
        assert_eq!(json, format!("\"{}\"", mode.as_str()));
    }
    assert!("pretrain_everything".parse::<RunMode>().is_err());
    let base = RunConfig::default();
    let table = [
        (Experiment::Oracle, None, RunMode::FinetuneClean),
        (Experiment::B1, None, RunMode::FinetuneWordOnly),
        (Experiment::B2, Some(RunMode::PretrainWordOnly), RunMode::FinetuneWordOnly),
        (Experiment::B3, Some(RunMode::PretrainJointG2pOnAsr), RunMode::FinetuneJoint),
        (Experiment::Joint, Some(RunMode::PretrainJoint), RunMode::FinetuneJoint),
        (Experiment::A1, Some(RunMode::PretrainJoint), RunMode::FinetuneWordOnly),
        (Experiment::A2, Some(RunMode::PretrainJoint), RunMode::FinetunePhonemeOnly),
        (Experiment::A3, Some(RunMode::PretrainJointNoJointLoss), RunMode::FinetuneJoint),
    ];
    for (exp, pre, fine) in table {
        let (p, f) = exp.run_configs(&base);
        assert_eq!(p.map(|c| c.mode), pre, "{}", exp.name());
        assert_eq!(f.mode, fine, "{}", exp.name());
    }
    assert_eq!(Experiment::B3.run_configs(&base).1.phoneme_source, PhonemeSource::G2pOnAsr);
}

#[test]
fn every_mode_trains_for_a_few_steps() {
    let f = fixture(48, 6);
    for mode in RunMode::ALL {
        let cfg = RunConfig {
            max_steps: Some(2),
            ..run_config(mode, 1, 1e-3)
        };
        if mode.is_pretrain() {
            let out = pretrain(&f.records, &f.vocab, &f.lexicon, &cfg, None).unwrap();
            assert_eq!(out.steps.len(), 2, "{mode}");
        } else {
            let out = finetune(None, &f.records, None, Some(&f.records), &f.vocab, &f.lexicon, &cfg).unwrap();
            assert_eq!(out.checkpoint.model.config.num_classes, 4, "{mode}");
            assert_eq!(out.test.unwrap().overall.count, f.records.len(), "{mode}");
        }
    }
}

#[test]
fn word_only_finetuning_needs_no_phoneme_field() {
    let f = fixture(80, 7);
    let pre_cfg = RunConfig {
        max_steps: Some(4),
        ..run_config(RunMode::PretrainJoint, 1, 1e-3)
    };
    let pre = pretrain(&f.records, &f.vocab, &f.lexicon, &pre_cfg, None).unwrap();
    let stripped: Vec<CorpusRecord> = f
        .records
        .iter()
        .map(|r| CorpusRecord {
            phoneme: None,
            ..r.clone()
        })
        .collect();
    let cfg = RunConfig {
        max_steps: Some(4),
        ..run_config(RunMode::FinetuneWordOnly, 1, 1e-3)
    };
    let out = finetune(Some(&pre.checkpoint), &stripped, None, Some(&stripped), &f.vocab, &f.lexicon, &cfg).unwrap();
    assert_eq!(out.test.unwrap().overall.count, stripped.len());

    let joint = RunConfig {
        mode: RunMode::FinetuneJoint,
        ..cfg
    };
    let err = finetune(Some(&pre.checkpoint), &stripped, None, None, &f.vocab, &f.lexicon, &joint).err().unwrap();
    assert!(matches!(&err, Error::MissingField { field: "phoneme", .. }), "{err}");
    assert!(err.to_string().contains("finetune_joint"));
}

#[test]
fn class_count_mismatch_names_both_counts() {
    let f = fixture(60, 8);
    let cfg = RunConfig {
        max_steps: Some(2),
        ..run_config(RunMode::FinetuneWordOnly, 1, 1e-3)
    };
    let three: Vec<CorpusRecord> = f.records.iter().filter(|r| r.label.unwrap() < 3).cloned().collect();
    let out = finetune(None, &three, None, None, &f.vocab, &f.lexicon, &cfg).unwrap();
    assert_eq!(out.checkpoint.model.config.num_classes, 3);
    let err = evaluate_checkpoint(&out.checkpoint, &f.records, &f.vocab, &f.lexicon, "m").unwrap_err();
    assert!(matches!(err, Error::ClassCount { model: 3, corpus: 4 }));
    let msg = err.to_string();
    assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    assert_eq!(err.exit_code(), 5);

    let capped = RunConfig {
        num_classes: Some(2),
        ..cfg
    };
    assert!(matches!(
        finetune(None, &three, None, None, &f.vocab, &f.lexicon, &capped).err().unwrap(),
        Error::ClassCount { model: 2, corpus: 3 }
    ));
}

#[test]
fn finetuning_returns_the_best_validation_epoch() {
    let f = fixture(120, 10);
    let cfg = run_config(RunMode::FinetuneJoint, 4, 1e-3);
    let out = finetune(None, &f.records[..90], Some(&f.records[90..]), None, &f.vocab, &f.lexicon, &cfg).unwrap();
    assert_eq!(out.epochs.len(), 4);
    let best = out.checkpoint.best.unwrap();
    let winner = out
        .epochs
        .iter()
        .fold(None::<&phonolm::trainer::EpochLog>, |acc, e| match acc {
            Some(a) if (e.validation.accuracy, e.validation.macro_f1) <= (a.validation.accuracy, a.validation.macro_f1) => Some(a),
            _ => Some(e),
        })
        .unwrap();
    assert_eq!(best.epoch, winner.epoch);
    // The returned weights reproduce the selected epoch's validation score.
    let preds = predict_records(&out.checkpoint, &f.records[90..], &f.vocab, &f.lexicon).unwrap();
    let gold: Vec<u32> = f.records[90..].iter().map(|r| r.label.unwrap()).collect();
    let acc = preds.iter().zip(&gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64;
    assert_eq!(acc, best.accuracy);
}

#[test]
fn periodic_checkpoints_are_written() {
    let f = fixture(64, 11);
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        max_steps: Some(6),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        checkpoint_every: 3,
        ..run_config(RunMode::PretrainWordOnly, 2, 1e-3)
    };
    let out = pretrain(&f.records, &f.vocab, &f.lexicon, &cfg, None).unwrap();
    let third = Checkpoint::load(dir.path().join("step-000003.pbrt")).unwrap();
    assert_eq!(third.counters.step, 3);
    let last = Checkpoint::load(dir.path().join("step-000006.pbrt")).unwrap();
    assert!(last.model.params.bitwise_eq(&out.checkpoint.model.params));
}

#[test]
fn sixty_four_samples_are_memorized_within_200_steps() {
    let f = fixture(64, 10);
    let cfg = RunConfig {
        max_steps: Some(200),
        ..run_config(RunMode::FinetuneJoint, 50, 1e-3)
    };
    let out = finetune(None, &f.records, Some(&f.records), None, &f.vocab, &f.lexicon, &cfg).unwrap();
    assert!(out.steps.len() <= 200);
    let preds = predict_records(&out.checkpoint, &f.records, &f.vocab, &f.lexicon).unwrap();
    let correct = preds.iter().zip(&f.records).filter(|(p, r)| Some(**p) == r.label).count();
    assert_eq!(correct, 64, "train accuracy {correct}/64");
}
