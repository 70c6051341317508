//! Joint (word ∥ phoneme) sequence layout and masked-LM batch construction.
//!
//! A joint sequence is laid out as `BOS w.. SEP p.. SEP`. Word-block positions
//! count up from the BOS at 0; phoneme positions restart at 0 on the first
//! phoneme token so the two blocks share a position frame. Type ids are 0 on the
//! word block with its flanking specials and 1 on the phoneme block with its
//! trailing SEP.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{below, rng_from_seed, uniform};
use crate::tokenizer::{JointVocabulary, TokenId, TokenType, BOS, MASK, PAD, SEP};

pub const WORD_TYPE: u8 = 0;
pub const PHONEME_TYPE: u8 = 1;

/// Default masking probability per maskable position.
pub const MASK_PROB: f64 = 0.15;
/// Share of selected positions replaced by the MASK token.
pub const MASK_TOKEN_SHARE: f64 = 0.8;
/// Share of selected positions left unchanged.
pub const KEEP_SHARE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointSequence {
    pub token_ids: Vec<TokenId>,
    pub position_ids: Vec<u32>,
    pub type_ids: Vec<u8>,
    pub word_span: Range<usize>,
    /// Empty in word-only layout.
    pub phoneme_span: Range<usize>,
}

impl JointSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn word_ids(&self) -> &[TokenId] {
        &self.token_ids[self.word_span.clone()]
    }

    pub fn phoneme_ids(&self) -> &[TokenId] {
        &self.token_ids[self.phoneme_span.clone()]
    }

    pub fn has_phoneme_block(&self) -> bool {
        self.token_ids.len() > self.word_span.end + 1
    }
}

/// Splits `budget` between two blocks in proportion to their lengths; the
/// rounding remainder goes to the longer block (word block on equal lengths).
fn proportional_split(words: usize, phonemes: usize, budget: usize) -> (usize, usize) {
    let total = words + phonemes;
    if total <= budget {
        return (words, phonemes);
    }
    let mut w = words * budget / total;
    let mut p = phonemes * budget / total;
    let mut rest = budget - w - p;
    while rest > 0 {
        if phonemes > words && p < phonemes {
            p += 1;
        } else if w < words {
            w += 1;
        } else {
            p += 1;
        }
        rest -= 1;
    }
    (w, p)
}

/// Lays out word and phoneme ids. Empty `phoneme_ids` yields the word-only
/// layout `BOS w.. SEP`. Overlong inputs are truncated proportionally.
pub fn assemble_sequence(
    word_ids: &[TokenId],
    phoneme_ids: &[TokenId],
    max_len: usize,
) -> Result<JointSequence> {
    if max_len < 4 {
        return Err(Error::Config(format!(
            "max_len {max_len} cannot hold the special tokens (need at least 4)"
        )));
    }
    let specials = if phoneme_ids.is_empty() { 2 } else { 3 };
    let (nw, np) = proportional_split(word_ids.len(), phoneme_ids.len(), max_len - specials);
    let mut seq = JointSequence {
        token_ids: Vec::with_capacity(nw + np + specials),
        position_ids: Vec::with_capacity(nw + np + specials),
        type_ids: Vec::with_capacity(nw + np + specials),
        word_span: 1..1 + nw,
        phoneme_span: 0..0,
    };
    seq.token_ids.push(BOS);
    seq.token_ids.extend_from_slice(&word_ids[..nw]);
    seq.token_ids.push(SEP);
    seq.position_ids.extend(0..(nw + 2) as u32);
    seq.type_ids.resize(nw + 2, WORD_TYPE);
    if !phoneme_ids.is_empty() {
        let start = seq.token_ids.len();
        seq.phoneme_span = start..start + np;
        seq.token_ids.extend_from_slice(&phoneme_ids[..np]);
        seq.token_ids.push(SEP);
        seq.position_ids.extend(0..(np + 1) as u32);
        seq.type_ids.resize(seq.token_ids.len(), PHONEME_TYPE);
    }
    Ok(seq)
}

/// Phoneme-only layout: the joint layout with an empty word block, so phoneme
/// tokens keep the positions and types they have in the joint layout.
pub fn assemble_phoneme_only(phoneme_ids: &[TokenId], max_len: usize) -> Result<JointSequence> {
    if max_len < 4 {
        return Err(Error::Config(format!(
            "max_len {max_len} cannot hold the special tokens (need at least 4)"
        )));
    }
    let np = phoneme_ids.len().min(max_len - 3);
    let mut token_ids = vec![BOS, SEP];
    token_ids.extend_from_slice(&phoneme_ids[..np]);
    token_ids.push(SEP);
    let mut position_ids = vec![0, 1];
    position_ids.extend(0..(np + 1) as u32);
    let mut type_ids = vec![WORD_TYPE, WORD_TYPE];
    type_ids.resize(np + 3, PHONEME_TYPE);
    Ok(JointSequence {
        token_ids,
        position_ids,
        type_ids,
        word_span: 1..1,
        phoneme_span: 2..2 + np,
    })
}

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAction {
    Mask,
    Keep,
    Random,
}

/// One masked row: masked inputs plus the targets at the selected positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedRow {
    pub masked_ids: Vec<TokenId>,
    pub original_ids: Vec<TokenId>,
    pub position_ids: Vec<u32>,
    pub type_ids: Vec<u8>,
    pub word_span: Range<usize>,
    pub phoneme_span: Range<usize>,
    /// Selected positions inside the word block (sorted).
    pub mask_positions_word: Vec<usize>,
    /// Selected positions inside the phoneme block (sorted).
    pub mask_positions_phoneme: Vec<usize>,
    pub actions: Vec<MaskAction>,
}

impl MaskedRow {
    /// A row with nothing selected, for classification and evaluation.
    pub fn unmasked(seq: &JointSequence) -> MaskedRow {
        MaskedRow {
            masked_ids: seq.token_ids.clone(),
            original_ids: seq.token_ids.clone(),
            position_ids: seq.position_ids.clone(),
            type_ids: seq.type_ids.clone(),
            word_span: seq.word_span.clone(),
            phoneme_span: seq.phoneme_span.clone(),
            mask_positions_word: Vec::new(),
            mask_positions_phoneme: Vec::new(),
            actions: Vec::new(),
        }
    }

    /// All selected positions in sequence order, with their targets.
    pub fn targets(&self) -> Vec<(usize, TokenId)> {
        self.mask_positions_word
            .iter()
            .chain(&self.mask_positions_phoneme)
            .map(|&i| (i, self.original_ids[i]))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.masked_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_ids.is_empty()
    }

    /// Word-only layout of this row (`BOS Â SEP`) with word targets.
    pub fn word_view(&self) -> MaskedRow {
        let span = self.word_span.clone();
        let mut masked_ids = vec![BOS];
        masked_ids.extend_from_slice(&self.masked_ids[span.clone()]);
        masked_ids.push(SEP);
        let mut original_ids = vec![BOS];
        original_ids.extend_from_slice(&self.original_ids[span.clone()]);
        original_ids.push(SEP);
        let n = masked_ids.len();
        let n_word = self.mask_positions_word.len();
        MaskedRow {
            masked_ids,
            original_ids,
            position_ids: (0..n as u32).collect(),
            type_ids: vec![WORD_TYPE; n],
            word_span: 1..1 + span.len(),
            phoneme_span: 0..0,
            mask_positions_word: self.mask_positions_word.iter().map(|&i| i - span.start + 1).collect(),
            mask_positions_phoneme: Vec::new(),
            actions: self.actions[..n_word].to_vec(),
        }
    }

    /// Phoneme-only layout of this row (`BOS SEP P̂ SEP`) with phoneme targets.
    pub fn phoneme_view(&self) -> MaskedRow {
        let span = self.phoneme_span.clone();
        let mut masked_ids = vec![BOS, SEP];
        masked_ids.extend_from_slice(&self.masked_ids[span.clone()]);
        masked_ids.push(SEP);
        let mut original_ids = vec![BOS, SEP];
        original_ids.extend_from_slice(&self.original_ids[span.clone()]);
        original_ids.push(SEP);
        let mut position_ids = vec![0, 1];
        position_ids.extend(0..(span.len() + 1) as u32);
        let mut type_ids = vec![WORD_TYPE, WORD_TYPE];
        type_ids.resize(masked_ids.len(), PHONEME_TYPE);
        let n_word = self.mask_positions_word.len();
        MaskedRow {
            masked_ids,
            original_ids,
            position_ids,
            type_ids,
            word_span: 1..1,
            phoneme_span: 2..2 + span.len(),
            mask_positions_word: Vec::new(),
            mask_positions_phoneme: self
                .mask_positions_phoneme
                .iter()
                .map(|&i| i - span.start + 2)
                .collect(),
            actions: self.actions[n_word..].to_vec(),
        }
    }
}

/// Applies masked-LM corruption. Every word or phoneme position is selected
/// independently with probability `mask_prob`; a selected token becomes MASK
/// (80%), stays (10%), or is replaced by a uniformly drawn id of its own type
/// (10%). Specials are never selected.
///
/// Draw order per maskable position: one uniform for selection, then for a
/// selected position one uniform for the action and, for `Random`, one more
/// for the replacement index `floor(u * type_range_len)`.
pub fn apply_masking(seq: &JointSequence, vocab: &JointVocabulary, mask_prob: f64, seed: u64) -> MaskedRow {
    let mut rng = rng_from_seed(seed);
    let mut masked_ids = seq.token_ids.clone();
    let mut row = MaskedRow {
        masked_ids: Vec::new(),
        original_ids: seq.token_ids.clone(),
        position_ids: seq.position_ids.clone(),
        type_ids: seq.type_ids.clone(),
        word_span: seq.word_span.clone(),
        phoneme_span: seq.phoneme_span.clone(),
        mask_positions_word: Vec::new(),
        mask_positions_phoneme: Vec::new(),
        actions: Vec::new(),
    };
    let mut word_actions = Vec::new();
    let mut phoneme_actions = Vec::new();
    for (i, &id) in seq.token_ids.iter().enumerate() {
        let ty = match vocab.type_of(id) {
            Some(TokenType::Special) | None => continue,
            Some(ty) => ty,
        };
        if uniform(&mut rng) >= mask_prob {
            continue;
        }
        let u = uniform(&mut rng);
        let action = if u < MASK_TOKEN_SHARE {
            masked_ids[i] = MASK;
            MaskAction::Mask
        } else if u < MASK_TOKEN_SHARE + KEEP_SHARE {
            MaskAction::Keep
        } else {
            let range = vocab.range_of(ty);
            let n = (range.end - range.start) as usize;
            masked_ids[i] = range.start + below(&mut rng, n) as TokenId;
            MaskAction::Random
        };
        if seq.phoneme_span.contains(&i) {
            row.mask_positions_phoneme.push(i);
            phoneme_actions.push(action);
        } else {
            row.mask_positions_word.push(i);
            word_actions.push(action);
        }
    }
    word_actions.extend(phoneme_actions);
    row.actions = word_actions;
    row.masked_ids = masked_ids;
    row
}

/// Right-padded batch of masked rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedJointBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Row-major `[batch_size, seq_len]`.
    pub masked_ids: Vec<TokenId>,
    pub attention_mask: Vec<u8>,
    pub position_ids: Vec<u32>,
    pub type_ids: Vec<u8>,
    /// Flat indices (`row * seq_len + col`) of word-block targets.
    pub mask_positions_word: Vec<usize>,
    /// Flat indices of phoneme-block targets.
    pub mask_positions_phoneme: Vec<usize>,
    /// Targets aligned with `mask_positions_word`.
    pub targets_word: Vec<TokenId>,
    /// Targets aligned with `mask_positions_phoneme`.
    pub targets_phoneme: Vec<TokenId>,
    /// Number of real (non-PAD) tokens per row.
    pub lengths: Vec<usize>,
}

impl MaskedJointBatch {
    pub fn num_targets(&self) -> usize {
        self.targets_word.len() + self.targets_phoneme.len()
    }

    /// Word targets followed by phoneme targets.
    pub fn all_positions(&self) -> (Vec<usize>, Vec<TokenId>) {
        let mut pos = self.mask_positions_word.clone();
        pos.extend_from_slice(&self.mask_positions_phoneme);
        let mut tgt = self.targets_word.clone();
        tgt.extend_from_slice(&self.targets_phoneme);
        (pos, tgt)
    }
}

/// Pads every row to the longest with PAD (position and type 0, attention 0).
pub fn collate_batch(rows: &[MaskedRow]) -> Result<MaskedJointBatch> {
    collate_batch_to(rows, 0)
}

/// Like [`collate_batch`] but pads to at least `min_len` columns.
pub fn collate_batch_to(rows: &[MaskedRow], min_len: usize) -> Result<MaskedJointBatch> {
    if rows.is_empty() {
        return Err(Error::Input("cannot collate an empty batch".into()));
    }
    let seq_len = rows.iter().map(MaskedRow::len).max().unwrap().max(min_len);
    let b = rows.len();
    let mut batch = MaskedJointBatch {
        batch_size: b,
        seq_len,
        masked_ids: vec![PAD; b * seq_len],
        attention_mask: vec![0; b * seq_len],
        position_ids: vec![0; b * seq_len],
        type_ids: vec![0; b * seq_len],
        mask_positions_word: Vec::new(),
        mask_positions_phoneme: Vec::new(),
        targets_word: Vec::new(),
        targets_phoneme: Vec::new(),
        lengths: Vec::with_capacity(b),
    };
    for (r, row) in rows.iter().enumerate() {
        let base = r * seq_len;
        let n = row.len();
        batch.masked_ids[base..base + n].copy_from_slice(&row.masked_ids);
        batch.position_ids[base..base + n].copy_from_slice(&row.position_ids);
        batch.type_ids[base..base + n].copy_from_slice(&row.type_ids);
        batch.attention_mask[base..base + n].fill(1);
        batch.lengths.push(n);
        for &i in &row.mask_positions_word {
            batch.mask_positions_word.push(base + i);
            batch.targets_word.push(row.original_ids[i]);
        }
        for &i in &row.mask_positions_phoneme {
            batch.mask_positions_phoneme.push(base + i);
            batch.targets_phoneme.push(row.original_ids[i]);
        }
    }
    Ok(batch)
}

/// Writes masked rows as JSON lines (debug dump).
pub fn dump_rows<W: Write>(mut out: W, rows: &[MaskedRow]) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<masked row dump>", e))?;
    }
    Ok(())
}
