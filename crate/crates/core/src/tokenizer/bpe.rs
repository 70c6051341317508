//! Byte-pair encoding over two base alphabets: raw bytes for word text and
//! ARPABET symbols (plus the pause) for phoneme sequences.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::phone::Phone;
use crate::error::{Error, Result};

/// Upper bound on the phoneme sub-word vocabulary, base symbols included.
pub const MAX_PHONEME_VOCAB: usize = 600;

/// Default word-mode merge budget.
pub const DEFAULT_WORD_MERGES: usize = 8000;

/// Pairs seen fewer times than this are never merged.
const MIN_PAIR_COUNT: usize = 2;

/// Separator between base symbols in the display form of a phoneme token.
const PHONE_JOINER: char = '_';

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BpeMode {
    Word,
    Phoneme,
}

impl BpeMode {
    pub fn base_size(self) -> usize {
        match self {
            BpeMode::Word => 256,
            BpeMode::Phoneme => Phone::COUNT,
        }
    }
}

impl std::str::FromStr for BpeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(BpeMode::Word),
            "phoneme" => Ok(BpeMode::Phoneme),
            other => Err(Error::Config(format!("unknown BPE mode `{other}`"))),
        }
    }
}

/// Trained merge table. Token ids are contiguous: the base alphabet occupies
/// `0..base_size`, and merge `k` creates token `base_size + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct BpeModel {
    mode: BpeMode,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    /// Base-symbol expansion of every token.
    pieces: Vec<Vec<u16>>,
    names: Vec<String>,
    name_to_id: HashMap<String, u32>,
}

impl BpeModel {
    /// A model with no merges: the vocabulary is exactly the base alphabet.
    pub fn base(mode: BpeMode) -> BpeModel {
        let mut model = BpeModel {
            mode,
            merges: Vec::new(),
            ranks: HashMap::new(),
            pieces: Vec::new(),
            names: Vec::new(),
            name_to_id: HashMap::new(),
        };
        for s in 0..mode.base_size() {
            model.push_token(vec![s as u16]);
        }
        model
    }

    fn push_token(&mut self, piece: Vec<u16>) -> u32 {
        let id = self.pieces.len() as u32;
        let name = self.piece_name(&piece);
        self.name_to_id.insert(name.clone(), id);
        self.names.push(name);
        self.pieces.push(piece);
        id
    }

    fn piece_name(&self, piece: &[u16]) -> String {
        match self.mode {
            BpeMode::Word => piece.iter().map(|&b| byte_to_char(b as u8)).collect(),
            BpeMode::Phoneme => {
                let syms: Vec<&str> = piece
                    .iter()
                    .map(|&s| Phone::from_index(s as usize).unwrap().symbol())
                    .collect();
                syms.join(&PHONE_JOINER.to_string())
            }
        }
    }

    fn add_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut piece = self.pieces[left as usize].clone();
        piece.extend_from_slice(&self.pieces[right as usize]);
        self.ranks.insert((left, right), self.merges.len() as u32);
        self.merges.push((left, right));
        self.push_token(piece)
    }

    pub fn mode(&self) -> BpeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, name: &str) -> Option<u32> {
        self.name_to_id.get(name).copied()
    }

    pub fn token_names(&self) -> &[String] {
        &self.names
    }

    pub fn piece(&self, id: u32) -> Option<&[u16]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// Rebuilds a model from its ordered merge list given as token names.
    pub fn from_merge_names(mode: BpeMode, merges: &[(String, String)]) -> Result<BpeModel> {
        let mut model = BpeModel::base(mode);
        for (l, r) in merges {
            let lookup = |name: &str| {
                model.token_id(name).ok_or_else(|| {
                    Error::Config(format!("merge refers to unknown token `{name}`"))
                })
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            model.add_merge(li, ri);
        }
        Ok(model)
    }

    pub fn merge_names(&self) -> Vec<(String, String)> {
        self.merges
            .iter()
            .map(|&(l, r)| (self.names[l as usize].clone(), self.names[r as usize].clone()))
            .collect()
    }

    /// Applies merges to a base-symbol sequence, lowest rank first, each merge
    /// replacing every non-overlapping occurrence left to right.
    pub fn encode_symbols(&self, symbols: &[u16]) -> Vec<u32> {
        let mut ids: Vec<u32> = symbols.iter().map(|&s| s as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, w[0], w[1])))
                .min();
            let Some((rank, l, r)) = best else { break };
            let new_id = (self.mode.base_size() as u32) + rank;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Word mode: encodes text with a virtual leading space so every word
    /// carries its boundary byte. Exact inverse of [`BpeModel::decode_text`].
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        debug_assert_eq!(self.mode, BpeMode::Word);
        if text.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::new();
        for chunk in word_chunks(text) {
            let syms: Vec<u16> = chunk.iter().map(|&b| b as u16).collect();
            out.extend(self.encode_symbols(&syms));
        }
        out
    }

    /// Bytes of the concatenated tokens (word mode).
    pub fn token_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            let piece = self
                .piece(id)
                .ok_or_else(|| Error::Input(format!("token id {id} out of range")))?;
            bytes.extend(piece.iter().map(|&b| b as u8));
        }
        Ok(bytes)
    }

    pub fn decode_text(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.token_bytes(ids)?;
        let body = bytes.strip_prefix(b" ").unwrap_or(&bytes);
        Ok(String::from_utf8_lossy(body).into_owned())
    }

    /// Phoneme mode: encodes a phoneme sequence; `None` entries (unknown
    /// symbols) split the sequence and are returned as `None`.
    pub fn encode_phones(&self, phones: &[Option<Phone>]) -> Vec<Option<u32>> {
        debug_assert_eq!(self.mode, BpeMode::Phoneme);
        let mut out = Vec::new();
        for (i, run) in phones.split(Option::is_none).enumerate() {
            if i > 0 {
                out.push(None);
            }
            let syms: Vec<u16> = run.iter().map(|p| p.unwrap().index() as u16).collect();
            out.extend(self.encode_symbols(&syms).into_iter().map(Some));
        }
        out
    }
}

/// Splits text (with a virtual leading space) into pre-tokenization chunks: a
/// word chunk is one optional space followed by non-whitespace bytes; any other
/// whitespace forms its own chunk.
fn word_chunks(text: &str) -> Vec<Vec<u8>> {
    let mut bytes = Vec::with_capacity(text.len() + 1);
    bytes.push(b' ');
    bytes.extend_from_slice(text.as_bytes());
    let is_ws = |c: char| c.is_whitespace();
    let s = String::from_utf8(bytes).expect("input is valid UTF-8");
    let mut chunks = Vec::new();
    let mut rest = s.as_str();
    while !rest.is_empty() {
        let ws_len = rest.find(|c: char| !is_ws(c)).unwrap_or(rest.len());
        if ws_len == rest.len() {
            chunks.push(rest.as_bytes().to_vec());
            break;
        }
        let (ws, tail) = rest.split_at(ws_len);
        let word_start = if ws.ends_with(' ') {
            if ws.len() > 1 {
                chunks.push(ws.as_bytes()[..ws.len() - 1].to_vec());
            }
            ws.len() - 1
        } else {
            if !ws.is_empty() {
                chunks.push(ws.as_bytes().to_vec());
            }
            ws.len()
        };
        let word_len = tail.find(is_ws).unwrap_or(tail.len());
        chunks.push(rest.as_bytes()[word_start..ws_len + word_len].to_vec());
        rest = &tail[word_len..];
    }
    chunks
}

/// Printable stand-in for every byte (the usual byte-level BPE convention).
fn byte_to_char(b: u8) -> char {
    let printable = |b: u8| (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
    if printable(b) {
        return char::from(b);
    }
    let offset = (0..b).filter(|&x| !printable(x)).count() as u32;
    char::from_u32(256 + offset).unwrap()
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: usize,
    key: (Vec<u16>, Vec<u16>),
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.key.cmp(&self.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learns up to `merge_budget` merges by repeatedly merging the most frequent
/// adjacent pair; ties go to the lexicographically smallest pair of base-symbol
/// expansions. Word mode consumes text lines; phoneme mode consumes
/// space-separated phoneme strings and treats each line as one unit, so pauses
/// merge like any other symbol. Phoneme vocabularies are capped at
/// [`MAX_PHONEME_VOCAB`] tokens.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], merge_budget: usize, mode: BpeMode) -> Result<BpeModel> {
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for line in corpus {
        let line = line.as_ref();
        match mode {
            BpeMode::Word => {
                if line.is_empty() {
                    continue;
                }
                for chunk in word_chunks(line) {
                    *counts.entry(chunk.iter().map(|&b| b as u32).collect()).or_default() += 1;
                }
            }
            BpeMode::Phoneme => {
                let syms: Vec<u32> = line
                    .split_whitespace()
                    .filter_map(Phone::parse)
                    .map(|p| p.index() as u32)
                    .collect();
                if !syms.is_empty() {
                    *counts.entry(syms).or_default() += 1;
                }
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::Input("BPE training corpus is empty".into()));
    }
    let budget = match mode {
        BpeMode::Word => merge_budget,
        BpeMode::Phoneme => merge_budget.min(MAX_PHONEME_VOCAB - mode.base_size()),
    };

    let mut model = BpeModel::base(mode);
    let mut units: Vec<(Vec<u32>, usize)> = counts.into_iter().collect();
    units.sort();

    let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (u, (syms, n)) in units.iter().enumerate() {
        for w in syms.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += n;
            where_.entry((w[0], w[1])).or_default().insert(u);
        }
    }
    let candidate = |model: &BpeModel, pair: (u32, u32), count: usize| Candidate {
        count,
        key: (model.pieces[pair.0 as usize].clone(), model.pieces[pair.1 as usize].clone()),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&p, &c)| candidate(&model, p, c))
        .collect();

    while model.merges.len() < budget {
        let Some(top) = heap.pop() else { break };
        let live = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if live != top.count {
            continue;
        }
        if live < MIN_PAIR_COUNT {
            break;
        }
        let (l, r) = top.pair;
        let new_id = model.add_merge(l, r);
        let affected: Vec<usize> = {
            let mut v: Vec<usize> = where_.remove(&top.pair).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for u in affected {
            let (syms, n) = &mut units[u];
            let n = *n;
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                if let Some(c) = pair_counts.get_mut(&p) {
                    *c -= n;
                }
                touched.insert(p);
            }
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            for w in merged.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_default() += n;
                where_.entry(p).or_default().insert(u);
                touched.insert(p);
            }
            *syms = merged;
        }
        pair_counts.remove(&top.pair);
        let mut touched: Vec<(u32, u32)> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            match pair_counts.get(&p).copied() {
                Some(0) | None => {
                    pair_counts.remove(&p);
                }
                Some(c) => heap.push(candidate(&model, p, c)),
            }
        }
    }
    Ok(model)
}
