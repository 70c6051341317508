//! Levenshtein alignment cost and the word/phoneme error rates built on it.

use crate::corpus::phone::Phone;
use crate::error::{Error, Result};

/// Unit-cost edit distance (substitutions + deletions + insertions).
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance that gives up once the result is known to exceed `limit`.
pub fn edit_distance_within<T: PartialEq>(a: &[T], b: &[T], limit: usize) -> Option<usize> {
    if a.len().abs_diff(b.len()) > limit {
        return None;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        let mut row_min = cur[0];
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
            row_min = row_min.min(cur[j + 1]);
        }
        if row_min > limit {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[b.len()];
    (d <= limit).then_some(d)
}

/// Word error rate of `hypothesis` against `reference`, both whitespace-tokenized.
pub fn compute_wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::Input("WER is undefined for an empty reference".into()));
    }
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Phoneme error rate over token sequences (pause marks count as tokens).
pub fn compute_per(reference: &[Phone], hypothesis: &[Phone]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("PER is undefined for an empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}


/// WER ranges used for bucketed reporting: an explicit under-10% bucket plus
/// the three ranges 10-20, 20-30 and 30+.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WerBucket {
    Under10,
    From10To20,
    From20To30,
    Over30,
}

impl WerBucket {
    pub const ALL: [WerBucket; 4] = [
        WerBucket::Under10,
        WerBucket::From10To20,
        WerBucket::From20To30,
        WerBucket::Over30,
    ];

    /// Half-open ranges `[lo, hi)`; values below zero fall in the first bucket.
    pub fn of(wer: f64) -> WerBucket {
        if wer < 0.10 {
            WerBucket::Under10
        } else if wer < 0.20 {
            WerBucket::From10To20
        } else if wer < 0.30 {
            WerBucket::From20To30
        } else {
            WerBucket::Over30
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            WerBucket::Under10 => "<10",
            WerBucket::From10To20 => "10-20",
            WerBucket::From20To30 => "20-30",
            WerBucket::Over30 => "30+",
        }
    }

    pub fn from_label(label: &str) -> Option<WerBucket> {
        WerBucket::ALL.into_iter().find(|b| b.label() == label)
    }
}
