//! C ABI over the phonolm vocabulary, WER scorer and fine-tuned classifier.
//!
//! Every fallible function returns a [`PhonolmStatus`]; on failure a message
//! is available from [`phonolm_last_error`] on the same thread. Objects are
//! opaque handles created by `*_load` and released by the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use phonolm::corpus::{compute_wer, CorpusRecord, Lexicon};
use phonolm::tokenizer::{BpeMode, JointVocabulary};
use phonolm::trainer::{predict_records, Checkpoint};
use phonolm::Error;

/// Result of a call. Codes 3-8 match the command-line tool's exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhonolmStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Input = 6,
    NonFinite = 7,
    Checkpoint = 8,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 9,
    /// An internal panic was caught at the boundary.
    Panic = 10,
}

/// Tokenizer mode for [`phonolm_vocab_encode`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhonolmMode {
    Word = 0,
    Phoneme = 1,
}

/// Joint word + phoneme vocabulary.
pub struct PhonolmVocab {
    inner: JointVocabulary,
}

/// Fine-tuned checkpoint bundled with its vocabulary and lexicon.
pub struct PhonolmClassifier {
    checkpoint: Checkpoint,
    vocab: JointVocabulary,
    lexicon: Lexicon,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

/// Failure inside a call: a status plus the message stored for the caller.
struct Failure(PhonolmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            3 => PhonolmStatus::Io,
            4 => PhonolmStatus::Parse,
            5 => PhonolmStatus::Config,
            6 => PhonolmStatus::Input,
            7 => PhonolmStatus::NonFinite,
            _ => PhonolmStatus::Checkpoint,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> PhonolmStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            PhonolmStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".to_string());
            PhonolmStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers of the public functions promise non-null pointers are valid.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(PhonolmStatus::NullArgument, format!("`{name}` is null")))
}

fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: as for `non_null`, and the pointee is writable.
    unsafe { p.as_mut() }.ok_or_else(|| Failure(PhonolmStatus::NullArgument, format!("`{name}` is null")))
}

fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PhonolmStatus::NullArgument, format!("`{name}` is null")));
    }
    // SAFETY: callers pass NUL-terminated strings.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(PhonolmStatus::InvalidUtf8, format!("`{name}` is not valid UTF-8")))
}

fn optional_string<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        string(p, name).map(Some)
    }
}

/// Message describing the last failed call on this thread, or NULL after a
/// successful one. Valid until the next call into this library.
#[no_mangle]
pub extern "C" fn phonolm_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn phonolm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a vocabulary JSON file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn phonolm_vocab_load(path: *const c_char, out: *mut *mut PhonolmVocab) -> PhonolmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let inner = JointVocabulary::load(string(path, "path")?)?;
        *out = Box::into_raw(Box::new(PhonolmVocab { inner }));
        Ok(())
    })
}

/// Releases a vocabulary. NULL is ignored.
///
/// # Safety
/// `vocab` must come from [`phonolm_vocab_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn phonolm_vocab_free(vocab: *mut PhonolmVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Number of token ids, special tokens included. 0 for NULL.
///
/// # Safety
/// `vocab` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn phonolm_vocab_size(vocab: *const PhonolmVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.inner.size())
}

/// Encodes `text` into `ids[0..capacity]` and writes the token count to
/// `*len`. When `capacity` is too small nothing is written to `ids`, `*len`
/// holds the required length and the status is `BUFFER_TOO_SMALL`.
///
/// # Safety
/// `vocab` must be a live handle, `text` NUL-terminated, `len` writable and
/// `ids` valid for `capacity` writes (it may be NULL when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn phonolm_vocab_encode(
    vocab: *const PhonolmVocab,
    text: *const c_char,
    mode: PhonolmMode,
    ids: *mut u32,
    capacity: usize,
    len: *mut usize,
) -> PhonolmStatus {
    guard(|| {
        let vocab = non_null(vocab, "vocab")?;
        let len = out_ptr(len, "len")?;
        let mode = match mode {
            PhonolmMode::Word => BpeMode::Word,
            PhonolmMode::Phoneme => BpeMode::Phoneme,
        };
        let encoded = vocab.inner.encode(string(text, "text")?, mode);
        *len = encoded.len();
        if encoded.len() > capacity {
            return Err(Failure(
                PhonolmStatus::BufferTooSmall,
                format!("{} ids do not fit in a buffer of {capacity}", encoded.len()),
            ));
        }
        if !encoded.is_empty() {
            if ids.is_null() {
                return Err(Failure(PhonolmStatus::NullArgument, "`ids` is null".into()));
            }
            ptr::copy_nonoverlapping(encoded.as_ptr(), ids, encoded.len());
        }
        Ok(())
    })
}

/// Word error rate of `hypothesis` against a non-empty `reference`.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn phonolm_compute_wer(reference: *const c_char, hypothesis: *const c_char, out: *mut f64) -> PhonolmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = compute_wer(string(reference, "reference")?, string(hypothesis, "hypothesis")?)?;
        Ok(())
    })
}

/// Loads a fine-tuned checkpoint with its vocabulary. `lexicon_path` may be
/// NULL to use the built-in pronunciation lexicon.
///
/// # Safety
/// Path arguments must be NUL-terminated (or NULL where allowed) and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn phonolm_classifier_load(
    checkpoint_path: *const c_char,
    vocab_path: *const c_char,
    lexicon_path: *const c_char,
    out: *mut *mut PhonolmClassifier,
) -> PhonolmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let checkpoint = Checkpoint::load(string(checkpoint_path, "checkpoint_path")?)?;
        let vocab = JointVocabulary::load(string(vocab_path, "vocab_path")?)?;
        let lexicon = match optional_string(lexicon_path, "lexicon_path")? {
            Some(p) => Lexicon::load(PathBuf::from(p))?,
            None => Lexicon::builtin(),
        };
        if checkpoint.model.config.num_classes == 0 {
            return Err(Failure(PhonolmStatus::Config, "checkpoint has no classification head".into()));
        }
        *out = Box::into_raw(Box::new(PhonolmClassifier { checkpoint, vocab, lexicon }));
        Ok(())
    })
}

/// Releases a classifier. NULL is ignored.
///
/// # Safety
/// `classifier` must come from [`phonolm_classifier_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn phonolm_classifier_free(classifier: *mut PhonolmClassifier) {
    if !classifier.is_null() {
        drop(Box::from_raw(classifier));
    }
}

/// Number of output classes. 0 for NULL.
///
/// # Safety
/// `classifier` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn phonolm_classifier_num_classes(classifier: *const PhonolmClassifier) -> usize {
    classifier.as_ref().map_or(0, |c| c.checkpoint.model.config.num_classes)
}

/// Predicts the class of one utterance. `transcript` is the (ASR) word
/// sequence; `phonemes` is a space-separated ARPAbet sequence, or NULL to
/// derive it from the transcript with the lexicon when the checkpoint's run
/// allows that.
///
/// # Safety
/// `classifier` must be a live handle, strings NUL-terminated (or NULL where
/// allowed) and `label` writable.
#[no_mangle]
pub unsafe extern "C" fn phonolm_classifier_predict(
    classifier: *const PhonolmClassifier,
    transcript: *const c_char,
    phonemes: *const c_char,
    label: *mut u32,
) -> PhonolmStatus {
    guard(|| {
        let c = non_null(classifier, "classifier")?;
        let label = out_ptr(label, "label")?;
        let transcript = string(transcript, "transcript")?;
        let record = CorpusRecord {
            clean: transcript.to_string(),
            asr: Some(transcript.to_string()),
            phoneme: optional_string(phonemes, "phonemes")?.map(str::to_string),
            wer: None,
            label: None,
        };
        let predictions = predict_records(&c.checkpoint, &[record], &c.vocab, &c.lexicon)?;
        *label = predictions[0];
        Ok(())
    })
}
