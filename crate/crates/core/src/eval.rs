//! Classification metrics and WER-bucketed reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::WerBucket;
use crate::error::{Error, Result};

/// Accuracy and macro-averaged F1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl std::fmt::Display for Metrics {
    /// `Accuracy / Macro-F1` in percent.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} / {:.2}", 100.0 * self.accuracy, 100.0 * self.macro_f1)
    }
}

/// Exact-match accuracy and the unweighted mean of per-class F1 over
/// `num_classes` classes. A class absent from both predictions and gold
/// contributes an F1 of 0.
pub fn evaluate_metrics(predictions: &[u32], gold: &[u32], num_classes: usize) -> Result<Metrics> {
    if predictions.len() != gold.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::Input("metrics need at least one class".into()));
    }
    if let Some(&bad) = predictions.iter().chain(gold).find(|&&c| c as usize >= num_classes) {
        return Err(Error::Input(format!("label {bad} outside {num_classes} classes")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut gold_count = vec![0usize; num_classes];
    for (&p, &g) in predictions.iter().zip(gold) {
        pred_count[p as usize] += 1;
        gold_count[g as usize] += 1;
        if p == g {
            tp[p as usize] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let accuracy = if gold.is_empty() {
        0.0
    } else {
        correct as f64 / gold.len() as f64
    };
    let f1_sum: f64 = (0..num_classes)
        .map(|c| {
            let denom = pred_count[c] + gold_count[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(Metrics {
        accuracy,
        macro_f1: f1_sum / num_classes as f64,
    })
}

/// One evaluated record: its stored WER, prediction and gold label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredRecord {
    pub wer: Option<f64>,
    pub prediction: u32,
    pub gold: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallStats {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub count: usize,
}

/// Accuracy of one WER range; `None` when the bucket is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub accuracy: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub mode: String,
    pub checkpoint: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: OverallStats,
    /// Keyed by range label: `<10`, `10-20`, `20-30`, `30+`.
    pub buckets: BTreeMap<String, BucketStats>,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn bucket(&self, b: WerBucket) -> &BucketStats {
        &self.buckets[b.label()]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Table-style rendering: one `range  Accuracy (count)` line per bucket.
    pub fn render_table(&self) -> String {
        let mut out = String::from("WER range  Accuracy  Count\n");
        for b in WerBucket::ALL {
            let s = self.bucket(b);
            let acc = s.accuracy.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
            out.push_str(&format!("{:<9}  {:>8}  {:>5}\n", b.label(), acc, s.count));
        }
        out.push_str(&format!(
            "{:<9}  {:>8}  {:>5}   (Accuracy / Macro-F1: {})\n",
            "Overall",
            format!("{:.2}", 100.0 * self.overall.accuracy),
            self.overall.count,
            Metrics {
                accuracy: self.overall.accuracy,
                macro_f1: self.overall.macro_f1,
            }
        ));
        out
    }
}

/// Routes every record into its WER bucket and reports per-bucket accuracy
/// together with overall accuracy and macro-F1.
pub fn wer_bucket_report(records: &[ScoredRecord], num_classes: usize, meta: ReportMeta) -> Result<EvalReport> {
    let mut counts: BTreeMap<&str, (usize, usize)> = WerBucket::ALL.iter().map(|b| (b.label(), (0, 0))).collect();
    for (i, r) in records.iter().enumerate() {
        let wer = r
            .wer
            .ok_or_else(|| Error::Input(format!("record {i} has no stored wer")))?;
        let slot = counts.get_mut(WerBucket::of(wer).label()).expect("every bucket is present");
        slot.0 += 1;
        slot.1 += usize::from(r.prediction == r.gold);
    }
    let preds: Vec<u32> = records.iter().map(|r| r.prediction).collect();
    let gold: Vec<u32> = records.iter().map(|r| r.gold).collect();
    let m = evaluate_metrics(&preds, &gold, num_classes)?;
    Ok(EvalReport {
        overall: OverallStats {
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            count: records.len(),
        },
        buckets: counts
            .into_iter()
            .map(|(label, (n, ok))| {
                let accuracy = (n > 0).then(|| ok as f64 / n as f64);
                (label.to_string(), BucketStats { accuracy, count: n })
            })
            .collect(),
        meta,
    })
}
