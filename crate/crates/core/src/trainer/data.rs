//! Turning corpus records into token-id rows for a given run mode.

use crate::batcher::{assemble_phoneme_only, assemble_sequence, JointSequence};
use crate::corpus::{CorpusRecord, Lexicon};
use crate::error::{Error, Result};
use crate::tokenizer::{JointVocabulary, TokenId};
use crate::trainer::config::{Layout, PhonemeSource, RunMode};

/// One record after tokenization.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedRecord {
    pub words: Vec<TokenId>,
    pub phonemes: Vec<TokenId>,
    pub label: Option<u32>,
    pub wer: Option<f64>,
}

impl EncodedRecord {
    /// Input sequence in `layout`, truncated to `max_len`.
    pub fn sequence(&self, layout: Layout, max_len: usize) -> Result<JointSequence> {
        match layout {
            Layout::Joint => assemble_sequence(&self.words, &self.phonemes, max_len),
            Layout::WordOnly => assemble_sequence(&self.words, &[], max_len),
            Layout::PhonemeOnly => assemble_phoneme_only(&self.phonemes, max_len),
        }
    }
}

/// Tokenizes `records` for `mode`, reading only the fields the mode needs.
///
/// Word tokens come from `asr` (or `clean` for clean-text fine-tuning);
/// phoneme tokens come from the `phoneme` field, or from G2P of `asr` when the
/// source is [`PhonemeSource::G2pOnAsr`]. A missing required field is an
/// error naming the mode, the field and the record.
pub fn encode_records(
    records: &[CorpusRecord],
    vocab: &JointVocabulary,
    lexicon: &Lexicon,
    mode: RunMode,
    phoneme_source: PhonemeSource,
    require_label: bool,
) -> Result<Vec<EncodedRecord>> {
    let layout = mode.layout();
    let source = mode.phoneme_source(phoneme_source);
    let missing = |field: &'static str, record: usize| Error::MissingField {
        mode: mode.as_str().to_string(),
        field,
        record,
    };
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let needs_words = layout != Layout::PhonemeOnly;
            let needs_asr = !mode.uses_clean_text() && (needs_words || source == Some(PhonemeSource::G2pOnAsr));
            let asr = match (needs_asr, &r.asr) {
                (true, None) => return Err(missing("asr", i)),
                (_, asr) => asr.as_deref(),
            };
            let words = if !needs_words {
                Vec::new()
            } else if mode.uses_clean_text() {
                vocab.encode_words(&r.clean)
            } else {
                vocab.encode_words(asr.unwrap_or_default())
            };
            let phonemes = match (layout, source) {
                (Layout::WordOnly, _) | (_, None) => Vec::new(),
                (_, Some(PhonemeSource::Independent)) => {
                    let p = r.phoneme.as_deref().ok_or_else(|| missing("phoneme", i))?;
                    vocab.encode_phoneme_str(p)
                }
                (_, Some(PhonemeSource::G2pOnAsr)) => vocab.encode_phones(&lexicon.g2p(asr.unwrap_or_default())),
            };
            if require_label && r.label.is_none() {
                return Err(missing("label", i));
            }
            Ok(EncodedRecord {
                words,
                phonemes,
                label: r.label,
                wer: r.wer,
            })
        })
        .collect()
}

/// Number of classes implied by the labels (largest label + 1).
pub fn label_class_count(records: &[EncodedRecord]) -> usize {
    records
        .iter()
        .filter_map(|r| r.label)
        .max()
        .map_or(0, |m| m as usize + 1)
}
