//! The closed ARPABET phoneme alphabet plus the word-boundary pause mark.

use std::fmt;

/// The 39 stress-free ARPABET symbols in canonical order.
pub const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

/// Rendering of the pause (word boundary) inside phoneme strings.
pub const PAUSE_MARK: &str = "|";

/// One phoneme token: an ARPABET symbol or the pause mark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Phone(u8);

impl Phone {
    pub const PAUSE: Phone = Phone(ARPABET.len() as u8);
    /// Number of distinct tokens including the pause.
    pub const COUNT: usize = ARPABET.len() + 1;

    pub fn from_index(index: usize) -> Option<Phone> {
        (index < Self::COUNT).then_some(Phone(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Parses an ARPABET symbol, ignoring case and any trailing stress digit.
    pub fn parse(symbol: &str) -> Option<Phone> {
        if symbol == PAUSE_MARK {
            return Some(Phone::PAUSE);
        }
        let bare = symbol.trim_end_matches(|c: char| c.is_ascii_digit());
        ARPABET
            .iter()
            .position(|s| s.eq_ignore_ascii_case(bare))
            .map(|i| Phone(i as u8))
    }

    pub fn symbol(self) -> &'static str {
        if self.is_pause() {
            PAUSE_MARK
        } else {
            ARPABET[self.0 as usize]
        }
    }

    pub fn is_pause(self) -> bool {
        self == Phone::PAUSE
    }

    pub fn all_phonemes() -> impl Iterator<Item = Phone> {
        (0..ARPABET.len()).map(|i| Phone(i as u8))
    }
}

impl fmt::Display for Phone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Space-joined rendering used by the corpus file format.
pub fn render_phones(phones: &[Phone]) -> String {
    let mut out = String::with_capacity(phones.len() * 3);
    for (i, p) in phones.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(p.symbol());
    }
    out
}

/// Inverse of [`render_phones`]; returns the offending token on failure.
pub fn parse_phones(text: &str) -> Result<Vec<Phone>, String> {
    text.split_whitespace()
        .map(|tok| Phone::parse(tok).ok_or_else(|| tok.to_string()))
        .collect()
}
