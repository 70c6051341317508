//! Parallel (ASR transcript, phoneme sequence) corpus generation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::channel::{phoneme_noise_channel, ChannelRates, NoiseConfig, WordChannel};
use crate::corpus::confusion::ConfusionClasses;
use crate::corpus::lexicon::{normalize_text, Lexicon};
use crate::corpus::phone::{parse_phones, render_phones, Phone};
use crate::corpus::wer::{compute_wer, edit_distance, WerBucket};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, uniform};

const LEVEL_SALT: u64 = 0x6C65_7665_6C00_0000;
const CALIBRATION_STEPS: usize = 30;
/// Coarse grid points scanned before word-rate bisection.
const CALIBRATION_SCAN: usize = 40;

/// One utterance of a generated corpus.
///
/// Only `clean` is mandatory on disk; task corpora may omit the phoneme or
/// transcript fields, and downstream consumers check what their mode needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub clean: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phoneme: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

impl CorpusRecord {
    pub fn phones(&self) -> Option<Result<Vec<Phone>>> {
        self.phoneme.as_ref().map(|p| {
            parse_phones(p).map_err(|tok| Error::Input(format!("unknown phoneme token `{tok}`")))
        })
    }
}

/// Raw input sentence with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSentence {
    pub text: String,
    pub label: Option<u32>,
}

impl SourceSentence {
    pub fn new(text: impl Into<String>, label: Option<u32>) -> Self {
        SourceSentence {
            text: text.into(),
            label,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub input_count: usize,
    pub emitted: usize,
    pub rejected_low_wer: usize,
    pub rejected_high_wer: usize,
    pub skipped_empty: usize,
    pub high_noise_inputs: usize,
    pub mean_wer: f64,
    /// Micro-averaged phoneme error rate of the emitted records.
    pub phoneme_error_rate: f64,
    pub histogram: BTreeMap<String, usize>,
    pub word_rates: Option<ChannelRates>,
    pub phoneme_rates: Option<ChannelRates>,
}

impl CorpusStats {
    pub fn rejected(&self) -> usize {
        self.rejected_low_wer + self.rejected_high_wer
    }
}

/// Result of running both channels on one sentence, before filtering.
#[derive(Clone, Debug)]
pub struct NoisyPair {
    pub asr: String,
    pub clean_phones: Vec<Phone>,
    pub phones: Vec<Phone>,
    pub wer: f64,
    pub high_noise: bool,
}

/// Holds the channels and (possibly calibrated) rates for one corpus build.
pub struct CorpusBuilder<'a> {
    cfg: NoiseConfig,
    channel: WordChannel<'a>,
    classes: &'a ConfusionClasses,
    word_rates: ChannelRates,
    phoneme_rates: ChannelRates,
}

impl<'a> CorpusBuilder<'a> {
    /// Normalized sentences also feed the insertion pool of the word channel.
    pub fn new(
        cfg: NoiseConfig,
        lexicon: &'a Lexicon,
        classes: &'a ConfusionClasses,
        normalized: &[String],
    ) -> Result<CorpusBuilder<'a>> {
        cfg.validate()?;
        let word_rates = cfg.word_rates();
        let phoneme_rates = cfg.phoneme_rates();
        Ok(CorpusBuilder {
            channel: WordChannel::from_corpus(lexicon, normalized),
            cfg,
            classes,
            word_rates,
            phoneme_rates,
        })
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.cfg
    }

    pub fn word_rates(&self) -> ChannelRates {
        self.word_rates
    }

    pub fn phoneme_rates(&self) -> ChannelRates {
        self.phoneme_rates
    }

    pub fn channel(&self) -> &WordChannel<'a> {
        &self.channel
    }

    /// Whether record `index` is generated at the higher noise level.
    pub fn is_high_noise(&self, index: usize) -> bool {
        let mut rng = rng_from_seed(derive_seed(self.cfg.seed ^ LEVEL_SALT, index as u64));
        uniform(&mut rng) < self.cfg.high_noise_fraction
    }

    fn level_rates(&self, base: ChannelRates, high: bool) -> ChannelRates {
        if high {
            base.scaled(self.cfg.high_noise_factor)
        } else {
            base
        }
    }

    pub fn word_seed(&self, index: usize) -> u64 {
        derive_seed(self.cfg.seed, 2 * index as u64)
    }

    pub fn phoneme_seed(&self, index: usize) -> u64 {
        derive_seed(self.cfg.seed, 2 * index as u64 + 1)
    }

    /// Phoneme channel output for record `index`, always computed from the
    /// clean-side pronunciation.
    pub fn noisy_phones(&self, index: usize, clean_phones: &[Phone]) -> Result<Vec<Phone>> {
        let rates = self.level_rates(self.phoneme_rates, self.is_high_noise(index));
        phoneme_noise_channel(clean_phones, rates, self.classes, self.phoneme_seed(index))
    }

    pub fn corrupt(&self, index: usize, clean: &str) -> Result<NoisyPair> {
        self.corrupt_with(index, clean, self.word_rates, self.phoneme_rates)
    }

    fn corrupt_with(
        &self,
        index: usize,
        clean: &str,
        word: ChannelRates,
        phoneme: ChannelRates,
    ) -> Result<NoisyPair> {
        let high = self.is_high_noise(index);
        let asr = self
            .channel
            .apply(clean, self.level_rates(word, high), self.word_seed(index))?;
        let wer = compute_wer(clean, &asr)?;
        let clean_phones = self.channel.lexicon().g2p(clean);
        let phones = phoneme_noise_channel(
            &clean_phones,
            self.level_rates(phoneme, high),
            self.classes,
            self.phoneme_seed(index),
        )?;
        Ok(NoisyPair {
            asr,
            clean_phones,
            phones,
            wer,
            high_noise: high,
        })
    }

    fn max_scale(&self, base: ChannelRates) -> f64 {
        1.0 / (base.total() * self.cfg.high_noise_factor)
    }

    /// Rescales the word rates so the mean WER of the records that survive
    /// the filter on the pilot sample matches the target.
    ///
    /// The filtered mean flattens out (and turns noisy) once most sentences
    /// exceed the ceiling, so a plain bisection over the whole range can settle
    /// on a very high scale that rejects most of the corpus. A coarse upward
    /// scan first brackets the smallest scale that reaches the target, and
    /// bisection then refines inside that bracket.
    pub fn calibrate_word_rates(&mut self, pilot: &[String], target: f64) -> Result<f64> {
        let base = self.cfg.word_rates();
        if base.total() == 0.0 || pilot.is_empty() {
            return Ok(0.0);
        }
        let max = self.max_scale(base);
        let (mut lo, mut hi) = (0.0, max);
        for k in 1..=CALIBRATION_SCAN {
            let scale = max * k as f64 / CALIBRATION_SCAN as f64;
            if self.pilot_mean_wer(pilot, base.scaled(scale))? >= target {
                hi = scale;
                break;
            }
            lo = scale;
        }
        let mut measured = 0.0;
        for _ in 0..CALIBRATION_STEPS {
            let mid = 0.5 * (lo + hi);
            measured = self.pilot_mean_wer(pilot, base.scaled(mid))?;
            if measured < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.word_rates = base.scaled(0.5 * (lo + hi));
        Ok(measured)
    }

    fn pilot_mean_wer(&self, pilot: &[String], rates: ChannelRates) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, s) in pilot.iter().enumerate() {
            let high = self.is_high_noise(i);
            let asr = self
                .channel
                .apply(s, self.level_rates(rates, high), self.word_seed(i))?;
            let wer = compute_wer(s, &asr)?;
            if wer >= self.cfg.wer_floor && wer <= self.cfg.wer_ceiling {
                sum += wer;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    /// Rescales the phoneme rates so the pilot's micro-averaged PER matches the target.
    pub fn calibrate_phoneme_rates(&mut self, pilot: &[String], target: f64) -> Result<f64> {
        let base = self.cfg.phoneme_rates();
        if base.total() == 0.0 || pilot.is_empty() {
            return Ok(0.0);
        }
        let lexicon = self.channel.lexicon();
        let clean: Vec<Vec<Phone>> = pilot.iter().map(|s| lexicon.g2p(s)).collect();
        let (mut lo, mut hi) = (0.0, self.max_scale(base));
        let mut measured = 0.0;
        for _ in 0..CALIBRATION_STEPS {
            let mid = 0.5 * (lo + hi);
            let rates = base.scaled(mid);
            let (mut edits, mut total) = (0usize, 0usize);
            for (i, c) in clean.iter().enumerate() {
                let r = self.level_rates(rates, self.is_high_noise(i));
                let noisy = phoneme_noise_channel(c, r, self.classes, self.phoneme_seed(i))?;
                edits += edit_distance(c, &noisy);
                total += c.len();
            }
            measured = edits as f64 / total.max(1) as f64;
            if measured < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.phoneme_rates = base.scaled(0.5 * (lo + hi));
        Ok(measured)
    }

    /// Runs both channels over every sentence and applies the WER filter.
    /// Output order follows input order.
    pub fn build(&self, sources: &[SourceSentence], normalized: &[String]) -> Result<(Vec<CorpusRecord>, CorpusStats)> {
        let mut stats = CorpusStats {
            input_count: sources.len(),
            word_rates: Some(self.word_rates),
            phoneme_rates: Some(self.phoneme_rates),
            ..CorpusStats::default()
        };
        for b in WerBucket::ALL {
            stats.histogram.insert(b.label().to_string(), 0);
        }
        let mut records = Vec::new();
        let (mut wer_sum, mut ph_edits, mut ph_total) = (0.0, 0usize, 0usize);
        for (i, (src, clean)) in sources.iter().zip(normalized).enumerate() {
            if clean.is_empty() {
                stats.skipped_empty += 1;
                continue;
            }
            let pair = self.corrupt(i, clean)?;
            if pair.high_noise {
                stats.high_noise_inputs += 1;
            }
            if pair.wer < self.cfg.wer_floor {
                stats.rejected_low_wer += 1;
                continue;
            }
            if pair.wer > self.cfg.wer_ceiling {
                stats.rejected_high_wer += 1;
                continue;
            }
            wer_sum += pair.wer;
            ph_edits += edit_distance(&pair.clean_phones, &pair.phones);
            ph_total += pair.clean_phones.len();
            *stats
                .histogram
                .get_mut(WerBucket::of(pair.wer).label())
                .unwrap() += 1;
            records.push(CorpusRecord {
                clean: clean.clone(),
                asr: Some(pair.asr),
                phoneme: Some(render_phones(&pair.phones)),
                wer: Some(pair.wer),
                label: src.label,
            });
        }
        stats.emitted = records.len();
        if stats.emitted > 0 {
            stats.mean_wer = wer_sum / stats.emitted as f64;
            stats.phoneme_error_rate = ph_edits as f64 / ph_total.max(1) as f64;
        }
        Ok((records, stats))
    }
}

/// Generates a filtered parallel corpus from raw sentences: normalizes text,
/// calibrates rates on a pilot sample when targets are set, then emits one
/// record per sentence whose WER lies within `[wer_floor, wer_ceiling]`.
pub fn build_corpus(
    sources: &[SourceSentence],
    cfg: &NoiseConfig,
    lexicon: &Lexicon,
    classes: &ConfusionClasses,
) -> Result<(Vec<CorpusRecord>, CorpusStats)> {
    if sources.is_empty() {
        return Err(Error::Input("corpus input is empty".into()));
    }
    let normalized: Vec<String> = sources.iter().map(|s| normalize_text(&s.text)).collect();
    let mut builder = CorpusBuilder::new(cfg.clone(), lexicon, classes, &normalized)?;
    let pilot: Vec<String> = normalized
        .iter()
        .filter(|s| !s.is_empty())
        .take(cfg.pilot_size)
        .cloned()
        .collect();
    if let Some(target) = cfg.target_mean_wer {
        let measured = builder.calibrate_word_rates(&pilot, target)?;
        info!("word channel calibrated: pilot mean WER {measured:.4} (target {target})");
    }
    if let Some(target) = cfg.target_per {
        let measured = builder.calibrate_phoneme_rates(&pilot, target)?;
        info!("phoneme channel calibrated: pilot PER {measured:.4} (target {target})");
    }
    builder.build(sources, &normalized)
}

/// Reads sentences, one per line. A line of the form `<label>\t<text>` carries
/// an integer class label.
pub fn read_sentences(path: impl AsRef<Path>) -> Result<Vec<SourceSentence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_sentence_line(&line));
    }
    Ok(out)
}

fn parse_sentence_line(line: &str) -> SourceSentence {
    if let Some((head, rest)) = line.split_once('\t') {
        if let Ok(label) = head.trim().parse::<u32>() {
            return SourceSentence::new(rest, Some(label));
        }
    }
    SourceSentence::new(line, None)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: "corpus record",
            line: lineno + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
