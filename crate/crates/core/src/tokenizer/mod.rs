//! Byte-level word BPE, phoneme BPE, and the joint vocabulary built from both.

pub mod bpe;
pub mod vocab;

pub use bpe::{train_bpe, BpeMode, BpeModel, DEFAULT_WORD_MERGES, MAX_PHONEME_VOCAB};
pub use vocab::{build_joint_vocab, JointVocabulary, TokenId, TokenType, BOS, MASK, NUM_SPECIALS, PAD, SEP, UNK};
