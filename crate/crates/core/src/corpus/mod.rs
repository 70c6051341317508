//! Parallel noisy corpus generation: G2P, word- and phoneme-level error
//! channels, WER/PER, and filtered JSON-lines corpus emission.

pub mod build;
pub mod channel;
pub mod confusion;
pub mod lexicon;
pub mod phone;
pub mod synth;
pub mod wer;

pub use build::{build_corpus, read_corpus, read_sentences, write_corpus, CorpusBuilder, CorpusRecord, CorpusStats, SourceSentence};
pub use channel::{phoneme_noise_channel, word_noise_channel, ChannelRates, NoiseConfig, WordChannel};
pub use confusion::ConfusionClasses;
pub use lexicon::{normalize_text, Lexicon};
pub use phone::{parse_phones, render_phones, Phone, ARPABET, PAUSE_MARK};
pub use synth::SyntheticTask;
pub use wer::{compute_per, compute_wer, edit_distance, WerBucket};
