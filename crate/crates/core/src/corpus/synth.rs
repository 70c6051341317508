//! Synthetic labelled sentence source. Each sentence hides one class keyword
//! among frequent filler words, so the label is a function of the clean text.

use crate::corpus::build::SourceSentence;
use crate::corpus::lexicon::Lexicon;
use crate::rng::{below, derive_seed, rng_from_seed};

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    keywords: Vec<Vec<String>>,
    fillers: Vec<String>,
    min_len: usize,
    max_len: usize,
}

impl SyntheticTask {
    /// Draws fillers from the most frequent lexicon words and keywords from
    /// the following frequency band, `per_class` keywords for each of
    /// `num_classes` classes.
    pub fn from_lexicon(lexicon: &Lexicon, num_classes: usize, per_class: usize, num_fillers: usize) -> SyntheticTask {
        assert!(num_classes > 0 && per_class > 0 && num_fillers > 0);
        let fillers: Vec<String> = lexicon.words().iter().take(num_fillers).cloned().collect();
        let mut keywords = vec![Vec::new(); num_classes];
        let pool = lexicon.words().iter().skip(num_fillers).filter(|w| {
            let n = lexicon.pronunciation(w).map_or(0, <[_]>::len);
            w.len() >= 3 && (3..=6).contains(&n)
        });
        for (i, w) in pool.take(num_classes * per_class).enumerate() {
            keywords[i % num_classes].push(w.clone());
        }
        SyntheticTask {
            keywords,
            fillers,
            min_len: 6,
            max_len: 10,
        }
    }

    pub fn with_lengths(mut self, min_len: usize, max_len: usize) -> SyntheticTask {
        assert!(1 <= min_len && min_len <= max_len);
        self.min_len = min_len;
        self.max_len = max_len;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.keywords.len()
    }

    pub fn keywords(&self, class: usize) -> &[String] {
        &self.keywords[class]
    }

    /// Class whose keyword occurs in `clean`, if exactly one class does.
    pub fn label_of(&self, clean: &str) -> Option<u32> {
        let mut found = None;
        for w in clean.split_whitespace() {
            for (c, kws) in self.keywords.iter().enumerate() {
                if kws.iter().any(|k| k == w) {
                    match found {
                        Some(prev) if prev != c => return None,
                        _ => found = Some(c),
                    }
                }
            }
        }
        found.map(|c| c as u32)
    }

    pub fn sentence(&self, seed: u64) -> SourceSentence {
        let mut rng = rng_from_seed(seed);
        let len = self.min_len + below(&mut rng, self.max_len - self.min_len + 1);
        let class = below(&mut rng, self.keywords.len());
        let slot = below(&mut rng, len);
        let words: Vec<&str> = (0..len)
            .map(|i| {
                if i == slot {
                    let kws = &self.keywords[class];
                    kws[below(&mut rng, kws.len())].as_str()
                } else {
                    self.fillers[below(&mut rng, self.fillers.len())].as_str()
                }
            })
            .collect();
        SourceSentence::new(words.join(" "), Some(class as u32))
    }

    pub fn generate(&self, count: usize, seed: u64) -> Vec<SourceSentence> {
        (0..count)
            .map(|i| self.sentence(derive_seed(seed, i as u64)))
            .collect()
    }
}
