//! The C ABI exercised from Rust and from a C program built against the header.

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use phonolm::corpus::{build_corpus, ConfusionClasses, Lexicon, NoiseConfig, SyntheticTask};
use phonolm::tokenizer::{build_joint_vocab, train_bpe, BpeMode, JointVocabulary};
use phonolm::trainer::{finetune, predict_records, RunConfig, RunMode};
use phonolm_ffi::*;

/// Writes a vocabulary and a one-epoch fine-tuned checkpoint into `dir`.
fn fixture(dir: &Path) -> (PathBuf, PathBuf, JointVocabulary, Vec<phonolm::corpus::CorpusRecord>) {
    let lex = Lexicon::builtin();
    let classes = ConfusionClasses::builtin();
    let sources = SyntheticTask::from_lexicon(&lex, 3, 4, 50).generate(400, 1);
    let noise = NoiseConfig { seed: 1, pilot_size: 100, ..NoiseConfig::default() };
    let (records, _) = build_corpus(&sources, &noise, &lex, &classes).unwrap();
    let words: Vec<&str> = records.iter().flat_map(|r| [r.asr.as_deref().unwrap(), r.clean.as_str()]).collect();
    let phones: Vec<&str> = records.iter().map(|r| r.phoneme.as_deref().unwrap()).collect();
    let vocab = build_joint_vocab(train_bpe(&words, 80, BpeMode::Word).unwrap(), train_bpe(&phones, 40, BpeMode::Phoneme).unwrap()).unwrap();
    let vocab_path = dir.join("vocab.json");
    vocab.save(&vocab_path).unwrap();
    let mut cfg = RunConfig::new(RunMode::FinetuneJoint);
    cfg.epochs = Some(1);
    cfg.seed = 2;
    let ckpt_path = dir.join("model.pbrt");
    cfg.output = Some(ckpt_path.clone());
    finetune(None, &records, None, None, &vocab, &lex, &cfg).unwrap();
    (vocab_path, ckpt_path, vocab, records)
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = phonolm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn vocab_handle_encodes_like_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (vocab_path, _, vocab, records) = fixture(dir.path());
    let mut handle = ptr::null_mut();
    let path = c(vocab_path.to_str().unwrap());
    unsafe {
        assert_eq!(phonolm_vocab_load(path.as_ptr(), &mut handle), PhonolmStatus::Ok);
        assert!(phonolm_last_error().is_null());
        assert_eq!(phonolm_vocab_size(handle), vocab.size());
        for (text, mode, lib_mode) in [
            (records[0].asr.as_deref().unwrap(), PhonolmMode::Word, BpeMode::Word),
            (records[0].phoneme.as_deref().unwrap(), PhonolmMode::Phoneme, BpeMode::Phoneme),
        ] {
            let expected = vocab.encode(text, lib_mode);
            let text = c(text);
            let mut len = 0usize;
            let status = phonolm_vocab_encode(handle, text.as_ptr(), mode, ptr::null_mut(), 0, &mut len);
            assert_eq!(status, PhonolmStatus::BufferTooSmall);
            assert_eq!(len, expected.len());
            let mut ids = vec![0u32; len];
            let status = phonolm_vocab_encode(handle, text.as_ptr(), mode, ids.as_mut_ptr(), ids.len(), &mut len);
            assert_eq!(status, PhonolmStatus::Ok);
            assert_eq!(ids, expected);
        }
        phonolm_vocab_free(handle);
        phonolm_vocab_free(ptr::null_mut());
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut handle = ptr::null_mut();
    let missing = c("/nonexistent/vocab.json");
    unsafe {
        assert_eq!(phonolm_vocab_load(missing.as_ptr(), &mut handle), PhonolmStatus::Io);
        assert!(handle.is_null());
        assert!(last_error().contains("/nonexistent/vocab.json"));
        assert_eq!(phonolm_vocab_load(ptr::null(), &mut handle), PhonolmStatus::NullArgument);
        let bad = [0xffu8, 0];
        assert_eq!(phonolm_vocab_load(bad.as_ptr().cast(), &mut handle), PhonolmStatus::InvalidUtf8);
        let mut wer = 0.0;
        assert_eq!(phonolm_compute_wer(c("").as_ptr(), c("a").as_ptr(), &mut wer), PhonolmStatus::Input);
        assert_eq!(phonolm_vocab_size(ptr::null()), 0);
        assert_eq!(phonolm_classifier_num_classes(ptr::null()), 0);
    }
}

#[test]
fn wer_matches_the_worked_example() {
    let mut wer = -1.0;
    let status = unsafe { phonolm_compute_wer(c("book a flight to boston").as_ptr(), c("book flight to austin").as_ptr(), &mut wer) };
    assert_eq!(status, PhonolmStatus::Ok);
    assert_eq!(wer, 0.4);
}

#[test]
fn classifier_handle_matches_library_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (vocab_path, ckpt_path, vocab, records) = fixture(dir.path());
    let ckpt = phonolm::trainer::Checkpoint::load(&ckpt_path).unwrap();
    let mut handle = ptr::null_mut();
    unsafe {
        let status = phonolm_classifier_load(
            c(ckpt_path.to_str().unwrap()).as_ptr(),
            c(vocab_path.to_str().unwrap()).as_ptr(),
            ptr::null(),
            &mut handle,
        );
        assert_eq!(status, PhonolmStatus::Ok, "{}", last_error());
        assert_eq!(phonolm_classifier_num_classes(handle), 3);
        for r in records.iter().take(20) {
            let asr = r.asr.clone().unwrap();
            let probe = phonolm::corpus::CorpusRecord { clean: asr.clone(), wer: None, label: None, ..r.clone() };
            let expected = predict_records(&ckpt, &[probe], &vocab, &Lexicon::builtin()).unwrap()[0];
            let mut label = u32::MAX;
            let status = phonolm_classifier_predict(handle, c(&asr).as_ptr(), c(r.phoneme.as_deref().unwrap()).as_ptr(), &mut label);
            assert_eq!(status, PhonolmStatus::Ok, "{}", last_error());
            assert_eq!(label, expected);
        }
        phonolm_classifier_free(handle);
    }
}

#[test]
fn c_program_links_against_the_header() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|cc| std::process::Command::new(cc).arg("--version").output().is_ok()) else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    // tests run from target/<profile>/deps; the libraries sit one level up.
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let staticlib = lib_dir.join("libphonolm_ffi.a");
    assert!(staticlib.exists(), "{} missing", staticlib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "phonolm.h"
int main(void) {
    double wer = 0.0;
    PhonolmVocab *vocab = NULL;
    if (phonolm_compute_wer("book a flight to boston", "book flight to austin", &wer) != PHONOLM_STATUS_OK) return 1;
    if (phonolm_vocab_load("/nonexistent.json", &vocab) != PHONOLM_STATUS_IO || vocab != NULL) return 2;
    if (phonolm_last_error() == NULL) return 3;
    printf("%s %.2f\n", phonolm_version(), wer);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("probe");
    let status = std::process::Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), format!("{} 0.40", env!("CARGO_PKG_VERSION")));
}
