//! Synthetic comparison of joint (word + phoneme) and word-only pretraining.
//!
//! `cargo run --release --example mechanism -- [seed] [experiment ...]`

use phonolm::corpus::WerBucket;
use phonolm::study::{prepare, run_experiments, StudyConfig};
use phonolm::trainer::Experiment;

fn main() -> phonolm::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let named: Vec<String> = args.collect();
    let experiments: Vec<Experiment> = if named.is_empty() {
        vec![Experiment::Joint, Experiment::B2, Experiment::A1]
    } else {
        Experiment::ALL
            .into_iter()
            .filter(|e| named.iter().any(|n| n.eq_ignore_ascii_case(e.name())))
            .collect()
    };
    let cfg = StudyConfig::default();
    let data = prepare(&cfg, seed)?;
    println!(
        "corpus: mean WER {:.4}, PER {:.4}, vocabulary {}",
        data.stats.mean_wer,
        data.stats.phoneme_error_rate,
        data.vocab.size()
    );
    let (runs, pretrains) = run_experiments(&data, &cfg, seed, &experiments)?;
    for p in &pretrains {
        println!("pretrain {:<28} {:>7.1}s", p.mode.as_str(), p.seconds);
    }
    for run in &runs {
        let buckets: Vec<String> = WerBucket::ALL
            .iter()
            .map(|&b| {
                let s = run.report.bucket(b);
                match s.accuracy {
                    Some(a) => format!("{} {:.3} (n={})", b.label(), a, s.count),
                    None => format!("{} - (n=0)", b.label()),
                }
            })
            .collect();
        println!(
            "{:<12} acc {:.4} f1 {:.4} | {} | {:.1}s",
            run.experiment.name(),
            run.report.overall.accuracy,
            run.report.overall.macro_f1,
            buckets.join(" | "),
            run.finetune_seconds
        );
    }
    Ok(())
}
