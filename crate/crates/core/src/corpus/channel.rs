//! Seeded stochastic error channels standing in for a TTS -> ASR round trip
//! (word level) and for an acoustic phoneme recognizer (phoneme level).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::corpus::confusion::ConfusionClasses;
use crate::corpus::lexicon::Lexicon;
use crate::corpus::phone::{Phone, ARPABET};
use crate::corpus::wer::edit_distance_within;
use crate::error::{Error, Result};
use crate::rng::{below, rng_from_seed, uniform};

/// Maximum phoneme edit distance for a substitution candidate.
pub const MAX_NEIGHBOR_DISTANCE: usize = 2;

/// Size of the unigram pool insertions are drawn from.
pub const INSERTION_POOL_SIZE: usize = 1000;

/// Per-position event probabilities of one channel. Events are mutually
/// exclusive, so the three rates must sum to at most one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelRates {
    pub sub: f64,
    pub del: f64,
    pub ins: f64,
}

impl ChannelRates {
    pub const ZERO: ChannelRates = ChannelRates {
        sub: 0.0,
        del: 0.0,
        ins: 0.0,
    };

    pub fn total(&self) -> f64 {
        self.sub + self.del + self.ins
    }

    pub fn scaled(&self, factor: f64) -> ChannelRates {
        ChannelRates {
            sub: self.sub * factor,
            del: self.del * factor,
            ins: self.ins * factor,
        }
    }

    pub fn validate(&self, channel: &str) -> Result<()> {
        for (name, v) in [("sub", self.sub), ("del", self.del), ("ins", self.ins)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "{channel} {name} rate {v} is outside [0, 1]"
                )));
            }
        }
        if self.total() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "{channel} rates sum to {} > 1 (events are exclusive per position)",
                self.total()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub word_sub_rate: f64,
    pub word_del_rate: f64,
    pub word_ins_rate: f64,
    pub phoneme_sub_rate: f64,
    pub phoneme_del_rate: f64,
    pub phoneme_ins_rate: f64,
    /// When set, word rates are rescaled (keeping their proportions) so the
    /// emitted corpus has this mean WER.
    pub target_mean_wer: Option<f64>,
    /// When set, phoneme rates are rescaled to hit this phoneme error rate.
    pub target_per: Option<f64>,
    pub wer_floor: f64,
    pub wer_ceiling: f64,
    /// Share of records generated at the second, higher noise level.
    pub high_noise_fraction: f64,
    /// Multiplier applied to word and phoneme rates at the higher noise level.
    pub high_noise_factor: f64,
    /// Sentences used for calibration.
    pub pilot_size: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            word_sub_rate: 0.20,
            word_del_rate: 0.06,
            word_ins_rate: 0.04,
            phoneme_sub_rate: 0.06,
            phoneme_del_rate: 0.025,
            phoneme_ins_rate: 0.017,
            target_mean_wer: Some(0.30),
            target_per: Some(0.102),
            wer_floor: 0.05,
            wer_ceiling: 0.40,
            high_noise_fraction: 0.25,
            high_noise_factor: 1.5,
            pilot_size: 1000,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// All channel rates zero and no calibration targets.
    pub fn noiseless() -> Self {
        NoiseConfig {
            word_sub_rate: 0.0,
            word_del_rate: 0.0,
            word_ins_rate: 0.0,
            phoneme_sub_rate: 0.0,
            phoneme_del_rate: 0.0,
            phoneme_ins_rate: 0.0,
            target_mean_wer: None,
            target_per: None,
            ..NoiseConfig::default()
        }
    }

    pub fn word_rates(&self) -> ChannelRates {
        ChannelRates {
            sub: self.word_sub_rate,
            del: self.word_del_rate,
            ins: self.word_ins_rate,
        }
    }

    pub fn phoneme_rates(&self) -> ChannelRates {
        ChannelRates {
            sub: self.phoneme_sub_rate,
            del: self.phoneme_del_rate,
            ins: self.phoneme_ins_rate,
        }
    }

    pub fn set_word_rates(&mut self, r: ChannelRates) {
        self.word_sub_rate = r.sub;
        self.word_del_rate = r.del;
        self.word_ins_rate = r.ins;
    }

    pub fn set_phoneme_rates(&mut self, r: ChannelRates) {
        self.phoneme_sub_rate = r.sub;
        self.phoneme_del_rate = r.del;
        self.phoneme_ins_rate = r.ins;
    }

    pub fn validate(&self) -> Result<()> {
        self.word_rates().validate("word")?;
        self.phoneme_rates().validate("phoneme")?;
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} {v} is outside [0, 1]")))
            }
        };
        frac("wer_floor", self.wer_floor)?;
        frac("high_noise_fraction", self.high_noise_fraction)?;
        if let Some(t) = self.target_mean_wer {
            frac("target_mean_wer", t)?;
        }
        if let Some(t) = self.target_per {
            frac("target_per", t)?;
        }
        if self.wer_floor >= self.wer_ceiling {
            return Err(Error::Config(format!(
                "wer_floor {} must be below wer_ceiling {}",
                self.wer_floor, self.wer_ceiling
            )));
        }
        if self.high_noise_factor < 1.0 || !self.high_noise_factor.is_finite() {
            return Err(Error::Config("high_noise_factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Word-level ASR error simulator. Substitutions pick the phonetically nearest
/// distinct lexicon word; insertions draw from a frequent-word pool.
pub struct WordChannel<'a> {
    lexicon: &'a Lexicon,
    insertion_pool: Vec<String>,
    neighbors: Mutex<HashMap<String, Arc<Vec<usize>>>>,
}

impl<'a> WordChannel<'a> {
    pub fn new(lexicon: &'a Lexicon, insertion_pool: Vec<String>) -> WordChannel<'a> {
        let insertion_pool = if insertion_pool.is_empty() {
            lexicon.words().iter().take(INSERTION_POOL_SIZE).cloned().collect()
        } else {
            insertion_pool
        };
        WordChannel {
            lexicon,
            insertion_pool,
            neighbors: Mutex::new(HashMap::new()),
        }
    }

    /// Insertion pool taken from the most frequent words of `sentences`
    /// (ties broken alphabetically).
    pub fn from_corpus<S: AsRef<str>>(lexicon: &'a Lexicon, sentences: &[S]) -> WordChannel<'a> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for w in s.as_ref().split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let pool = ranked
            .into_iter()
            .take(INSERTION_POOL_SIZE)
            .map(|(w, _)| w.to_string())
            .collect();
        WordChannel::new(lexicon, pool)
    }

    pub fn lexicon(&self) -> &Lexicon {
        self.lexicon
    }

    pub fn insertion_pool(&self) -> &[String] {
        &self.insertion_pool
    }

    /// Lexicon word ids at the minimum phoneme edit distance (at most
    /// [`MAX_NEIGHBOR_DISTANCE`]) from `word`, excluding `word` itself, in lexicon order.
    pub fn nearest_neighbors(&self, word: &str) -> Arc<Vec<usize>> {
        if let Some(hit) = self.neighbors.lock().unwrap().get(word) {
            return Arc::clone(hit);
        }
        let found = Arc::new(self.scan_neighbors(word));
        self.neighbors
            .lock()
            .unwrap()
            .insert(word.to_string(), Arc::clone(&found));
        found
    }

    fn scan_neighbors(&self, word: &str) -> Vec<usize> {
        let pron = self.lexicon.word_phones(word);
        let self_id = self.lexicon.word_id(word);
        let mut best = MAX_NEIGHBOR_DISTANCE;
        let mut found: Vec<usize> = Vec::new();
        for (key, ids) in self.lexicon.inverse_entries() {
            let Some(d) = edit_distance_within(&pron, key, best) else {
                continue;
            };
            let others = ids.iter().copied().filter(|&id| Some(id) != self_id);
            if d < best {
                let others: Vec<usize> = others.collect();
                if !others.is_empty() {
                    best = d;
                    found = others;
                }
            } else {
                found.extend(others);
            }
        }
        found.sort_unstable();
        found
    }

    /// Runs the channel over `clean` (whitespace tokenized).
    pub fn apply(&self, clean: &str, rates: ChannelRates, seed: u64) -> Result<String> {
        rates.validate("word")?;
        let mut rng = rng_from_seed(seed);
        let mut out: Vec<&str> = Vec::new();
        for word in clean.split_whitespace() {
            let u = uniform(&mut rng);
            if u < rates.sub {
                let cands = self.nearest_neighbors(word);
                if cands.is_empty() {
                    out.push(word);
                } else {
                    let pick = cands[below(&mut rng, cands.len())];
                    out.push(self.lexicon.word(pick));
                }
            } else if u < rates.sub + rates.del {
            } else if u < rates.total() {
                out.push(word);
                let extra = below(&mut rng, self.insertion_pool.len());
                out.push(&self.insertion_pool[extra]);
            } else {
                out.push(word);
            }
        }
        Ok(out.join(" "))
    }
}

/// Word channel with the word rates and seed of `cfg`.
pub fn word_noise_channel(clean_text: &str, cfg: &NoiseConfig, channel: &WordChannel<'_>) -> Result<String> {
    channel.apply(clean_text, cfg.word_rates(), cfg.seed)
}

/// Phoneme-level error channel over a clean pronunciation. Substitutions stay
/// within the confusion class; pauses may be deleted but never substituted.
/// A non-empty input never yields an empty output: if every token would be
/// deleted, the first input token is kept.
pub fn phoneme_noise_channel(
    clean: &[Phone],
    rates: ChannelRates,
    classes: &ConfusionClasses,
    seed: u64,
) -> Result<Vec<Phone>> {
    rates.validate("phoneme")?;
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(clean.len() + 4);
    for &p in clean {
        let u = uniform(&mut rng);
        if u < rates.sub {
            match classes.class_of(p) {
                Some(class) => {
                    let k = below(&mut rng, class.len() - 1);
                    let others = class.iter().copied().filter(|&q| q != p);
                    out.push(others.clone().nth(k).unwrap());
                }
                None => out.push(p),
            }
        } else if u < rates.sub + rates.del {
        } else if u < rates.total() {
            out.push(p);
            out.push(Phone::from_index(below(&mut rng, ARPABET.len())).unwrap());
        } else {
            out.push(p);
        }
    }
    if out.is_empty() {
        if let Some(&first) = clean.first() {
            out.push(first);
        }
    }
    Ok(out)
}
