//! Joint id space: specials, then word sub-words, then phoneme sub-words.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::phone::Phone;
use crate::error::{Error, Result};
use crate::tokenizer::bpe::{BpeMode, BpeModel, MAX_PHONEME_VOCAB};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const MASK: TokenId = 2;
pub const PAD: TokenId = 3;
pub const UNK: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[BOS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenType {
    Word,
    Phoneme,
    Special,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointVocabulary {
    word: BpeModel,
    phoneme: BpeModel,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: Vec<String>,
    word_tokens: Vec<String>,
    phoneme_tokens: Vec<String>,
    word_merges: Vec<(String, String)>,
    phoneme_merges: Vec<(String, String)>,
}

impl JointVocabulary {
    pub fn new(word: BpeModel, phoneme: BpeModel) -> Result<JointVocabulary> {
        if word.mode() != BpeMode::Word || phoneme.mode() != BpeMode::Phoneme {
            return Err(Error::Config("joint vocabulary needs a word model and a phoneme model".into()));
        }
        if phoneme.len() > MAX_PHONEME_VOCAB {
            return Err(Error::Config(format!(
                "phoneme vocabulary has {} units, the limit is {MAX_PHONEME_VOCAB}",
                phoneme.len()
            )));
        }
        Ok(JointVocabulary { word, phoneme })
    }

    pub fn word_model(&self) -> &BpeModel {
        &self.word
    }

    pub fn phoneme_model(&self) -> &BpeModel {
        &self.phoneme
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS + self.word.len() + self.phoneme.len()
    }

    pub fn word_range(&self) -> Range<TokenId> {
        let lo = NUM_SPECIALS as TokenId;
        lo..lo + self.word.len() as TokenId
    }

    pub fn phoneme_range(&self) -> Range<TokenId> {
        let lo = self.word_range().end;
        lo..lo + self.phoneme.len() as TokenId
    }

    /// `None` for ids outside the vocabulary.
    pub fn type_of(&self, id: TokenId) -> Option<TokenType> {
        if (id as usize) < NUM_SPECIALS {
            Some(TokenType::Special)
        } else if self.word_range().contains(&id) {
            Some(TokenType::Word)
        } else if self.phoneme_range().contains(&id) {
            Some(TokenType::Phoneme)
        } else {
            None
        }
    }

    /// Id range a token of `ty` is resampled from during masking.
    pub fn range_of(&self, ty: TokenType) -> Range<TokenId> {
        match ty {
            TokenType::Word => self.word_range(),
            TokenType::Phoneme => self.phoneme_range(),
            TokenType::Special => 0..NUM_SPECIALS as TokenId,
        }
    }

    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        let off = self.word_range().start;
        self.word.encode_text(text).into_iter().map(|i| i + off).collect()
    }

    /// Unknown symbols become [`UNK`].
    pub fn encode_phoneme_str(&self, text: &str) -> Vec<TokenId> {
        let syms: Vec<Option<Phone>> = text.split_whitespace().map(Phone::parse).collect();
        self.encode_phone_options(&syms)
    }

    pub fn encode_phones(&self, phones: &[Phone]) -> Vec<TokenId> {
        let syms: Vec<Option<Phone>> = phones.iter().copied().map(Some).collect();
        self.encode_phone_options(&syms)
    }

    fn encode_phone_options(&self, syms: &[Option<Phone>]) -> Vec<TokenId> {
        let off = self.phoneme_range().start;
        self.phoneme
            .encode_phones(syms)
            .into_iter()
            .map(|id| id.map_or(UNK, |i| i + off))
            .collect()
    }

    /// Encodes in the given mode: word text or a space-separated phoneme string.
    pub fn encode(&self, input: &str, mode: BpeMode) -> Vec<TokenId> {
        match mode {
            BpeMode::Word => self.encode_words(input),
            BpeMode::Phoneme => self.encode_phoneme_str(input),
        }
    }

    pub fn token_name(&self, id: TokenId) -> Option<&str> {
        match self.type_of(id)? {
            TokenType::Special => Some(SPECIAL_NAMES[id as usize]),
            TokenType::Word => self.word.token_name(id - self.word_range().start),
            TokenType::Phoneme => self.phoneme.token_name(id - self.phoneme_range().start),
        }
    }

    /// Renders ids back to text. Runs of word tokens are decoded as bytes,
    /// phoneme tokens as space-separated symbols, specials as bracketed names.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        enum Run {
            Word(Vec<u32>),
            Phoneme(Vec<&'static str>),
        }
        let mut pieces: Vec<String> = Vec::new();
        let mut run: Option<Run> = None;
        let flush = |run: Option<Run>, pieces: &mut Vec<String>, first: bool| -> Result<()> {
            match run {
                Some(Run::Word(ids)) => {
                    let bytes = self.word.token_bytes(&ids)?;
                    let body = if first {
                        bytes.strip_prefix(b" ").unwrap_or(&bytes)
                    } else {
                        &bytes
                    };
                    pieces.push(String::from_utf8_lossy(body).into_owned());
                }
                Some(Run::Phoneme(syms)) => {
                    let sep = if first { "" } else { " " };
                    pieces.push(format!("{sep}{}", syms.join(" ")));
                }
                None => {}
            }
            Ok(())
        };
        for &id in ids {
            let ty = self
                .type_of(id)
                .ok_or_else(|| Error::Input(format!("token id {id} is outside the vocabulary ({})", self.size())))?;
            match ty {
                TokenType::Special => {
                    let first = pieces.is_empty();
                    flush(run.take(), &mut pieces, first)?;
                    pieces.push(SPECIAL_NAMES[id as usize].to_string());
                }
                TokenType::Word => {
                    let local = id - self.word_range().start;
                    match &mut run {
                        Some(Run::Word(v)) => v.push(local),
                        _ => {
                            let first = pieces.is_empty();
                            flush(run.take(), &mut pieces, first)?;
                            run = Some(Run::Word(vec![local]));
                        }
                    }
                }
                TokenType::Phoneme => {
                    let piece = self.phoneme.piece(id - self.phoneme_range().start).unwrap();
                    let syms = piece.iter().map(|&s| Phone::from_index(s as usize).unwrap().symbol());
                    match &mut run {
                        Some(Run::Phoneme(v)) => v.extend(syms),
                        _ => {
                            let first = pieces.is_empty();
                            flush(run.take(), &mut pieces, first)?;
                            run = Some(Run::Phoneme(syms.collect()));
                        }
                    }
                }
            }
        }
        let first = pieces.is_empty();
        flush(run, &mut pieces, first)?;
        Ok(pieces.concat())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            word_tokens: self.word.token_names().to_vec(),
            phoneme_tokens: self.phoneme.token_names().to_vec(),
            word_merges: self.word.merge_names(),
            phoneme_merges: self.phoneme.merge_names(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<JointVocabulary> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.specials != SPECIAL_NAMES {
            return Err(Error::Config(format!("unexpected specials {:?}", file.specials)));
        }
        let word = BpeModel::from_merge_names(BpeMode::Word, &file.word_merges)?;
        let phoneme = BpeModel::from_merge_names(BpeMode::Phoneme, &file.phoneme_merges)?;
        if word.token_names() != file.word_tokens.as_slice()
            || phoneme.token_names() != file.phoneme_tokens.as_slice()
        {
            return Err(Error::Config("token list disagrees with the merge list".into()));
        }
        JointVocabulary::new(word, phoneme)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<JointVocabulary> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        JointVocabulary::from_json(&text)
    }
}

/// Merges a word model and a phoneme model into one joint vocabulary.
pub fn build_joint_vocab(word_model: BpeModel, phoneme_model: BpeModel) -> Result<JointVocabulary> {
    JointVocabulary::new(word_model, phoneme_model)
}
