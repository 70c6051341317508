//! Pronouncing lexicon (CMUdict format) and lexicon-driven G2P.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::corpus::phone::Phone;
use crate::error::{Error, Result};

const BUILTIN_LEXICON: &str = include_str!("../../data/lexicon.dict");

/// Fixed one-symbol-per-character spelling fallback for out-of-vocabulary words.
const LETTER_FALLBACK: [(char, &str); 36] = [
    ('a', "AE"), ('b', "B"), ('c', "K"), ('d', "D"), ('e', "EH"), ('f', "F"),
    ('g', "G"), ('h', "HH"), ('i', "IH"), ('j', "JH"), ('k', "K"), ('l', "L"),
    ('m', "M"), ('n', "N"), ('o', "AA"), ('p', "P"), ('q', "K"), ('r', "R"),
    ('s', "S"), ('t', "T"), ('u', "AH"), ('v', "V"), ('w', "W"), ('x', "S"),
    ('y', "Y"), ('z', "Z"), ('0', "Z"), ('1', "W"), ('2', "T"), ('3', "TH"),
    ('4', "F"), ('5', "F"), ('6', "S"), ('7', "S"), ('8', "EY"), ('9', "N"),
];

#[derive(Debug)]
pub struct Lexicon {
    words: Vec<String>,
    prons: Vec<Vec<Phone>>,
    index: HashMap<String, usize>,
    /// Distinct pronunciations in first-seen order, each with the words sharing it.
    inverse: Vec<(Vec<Phone>, Vec<usize>)>,
    inverse_index: HashMap<Vec<Phone>, usize>,
    letter_fallback: [Phone; 36],
    dropped_chars: AtomicUsize,
}

impl Lexicon {
    /// The shipped 12,000-word lexicon.
    pub fn builtin() -> Lexicon {
        Lexicon::parse(BUILTIN_LEXICON).expect("builtin lexicon is well formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Lexicon> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::parse(&text)
    }

    /// Parses CMUdict text. Alternate pronunciations (`WORD(2)`) are skipped;
    /// the first pronunciation of a word wins.
    pub fn parse(text: &str) -> Result<Lexicon> {
        let mut entries = Vec::new();
        let mut seen = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(";;;") {
                continue;
            }
            let mut fields = line.split_whitespace();
            let head = fields.next().unwrap_or_default();
            if head.ends_with(')') && head.contains('(') {
                continue;
            }
            let word = head.to_lowercase();
            let mut pron = Vec::new();
            for sym in fields {
                if sym.starts_with('#') {
                    break;
                }
                match Phone::parse(sym) {
                    Some(p) if !p.is_pause() => pron.push(p),
                    _ => {
                        return Err(Error::Parse {
                            what: "lexicon",
                            line: lineno + 1,
                            message: format!("unknown phoneme `{sym}`"),
                        })
                    }
                }
            }
            if pron.is_empty() {
                return Err(Error::Parse {
                    what: "lexicon",
                    line: lineno + 1,
                    message: format!("`{word}` has no pronunciation"),
                });
            }
            if seen.insert(word.clone(), ()).is_none() {
                entries.push((word, pron));
            }
        }
        Ok(Lexicon::from_entries(entries))
    }

    pub fn from_entries(entries: Vec<(String, Vec<Phone>)>) -> Lexicon {
        let mut words = Vec::with_capacity(entries.len());
        let mut prons = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        let mut inverse: Vec<(Vec<Phone>, Vec<usize>)> = Vec::new();
        let mut inverse_index: HashMap<Vec<Phone>, usize> = HashMap::new();
        for (word, pron) in entries {
            if index.contains_key(&word) {
                continue;
            }
            let id = words.len();
            index.insert(word.clone(), id);
            match inverse_index.get(&pron) {
                Some(&slot) => inverse[slot].1.push(id),
                None => {
                    inverse_index.insert(pron.clone(), inverse.len());
                    inverse.push((pron.clone(), vec![id]));
                }
            }
            words.push(word);
            prons.push(pron);
        }
        let letter_fallback = LETTER_FALLBACK.map(|(_, sym)| Phone::parse(sym).unwrap());
        Lexicon {
            words,
            prons,
            index,
            inverse,
            inverse_index,
            letter_fallback,
            dropped_chars: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words in file order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn pronunciation(&self, word: &str) -> Option<&[Phone]> {
        self.word_id(word).map(|id| self.prons[id].as_slice())
    }

    /// Words whose pronunciation is exactly `pron`.
    pub fn words_with_pronunciation(&self, pron: &[Phone]) -> &[usize] {
        self.inverse_index
            .get(pron)
            .map(|&slot| self.inverse[slot].1.as_slice())
            .unwrap_or(&[])
    }

    /// Distinct pronunciations with the ids of the words that share them.
    pub fn inverse_entries(&self) -> &[(Vec<Phone>, Vec<usize>)] {
        &self.inverse
    }

    pub fn letter_fallback(&self, c: char) -> Option<Phone> {
        let i = match c {
            'a'..='z' => c as usize - 'a' as usize,
            '0'..='9' => 26 + c as usize - '0' as usize,
            _ => return None,
        };
        Some(self.letter_fallback[i])
    }

    /// Characters dropped by [`Lexicon::g2p`] so far.
    pub fn dropped_chars(&self) -> usize {
        self.dropped_chars.load(Ordering::Relaxed)
    }

    /// Pronunciation of a single normalized word: lexicon lookup, else spelled out.
    pub fn word_phones(&self, word: &str) -> Vec<Phone> {
        if let Some(p) = self.pronunciation(word) {
            return p.to_vec();
        }
        let mut out = Vec::with_capacity(word.len());
        for c in word.chars() {
            match self.letter_fallback(c) {
                Some(p) => out.push(p),
                None => {
                    self.dropped_chars.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        out
    }

    /// Grapheme-to-phoneme conversion of a sentence. Word pronunciations are
    /// joined by a single pause; words that yield no phonemes are skipped.
    pub fn g2p(&self, text: &str) -> Vec<Phone> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let word = word.to_lowercase();
            let word = word.trim_matches(|c: char| c.is_ascii_punctuation());
            let phones = self.word_phones(word);
            if phones.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push(Phone::PAUSE);
            }
            out.extend(phones);
        }
        out
    }
}

/// Lowercases, strips punctuation other than in-word apostrophes, and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let cleaned: String = lower
            .chars()
            .filter(|c| c.is_alphanumeric() || *c == '\'')
            .collect();
        let cleaned = cleaned.trim_matches('\'');
        if !cleaned.is_empty() {
            words.push(cleaned.to_string());
        }
    }
    words.join(" ")
}
