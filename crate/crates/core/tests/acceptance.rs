//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Runs as a plain binary (`harness = false`). Optional arguments select
//! criteria whose name contains any of them, e.g.
//! `cargo test -p phonolm --test acceptance -- masking layout`.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use phonolm::batcher::{apply_masking, assemble_sequence, MaskAction, MaskedRow, MASK_PROB, PHONEME_TYPE, WORD_TYPE};
use phonolm::corpus::{
    build_corpus, compute_wer, render_phones, ConfusionClasses, CorpusRecord, Lexicon, NoiseConfig, SourceSentence, SyntheticTask, WerBucket,
};
use phonolm::model::{joint_pretrain_loss, masked_prediction_accuracy, Model, ModelConfig, Objective};
use phonolm::rng::{below, normal, rng_from_seed};
use phonolm::study::{prepare, run_experiments, StudyConfig};
use phonolm::tensor::{gradient_check, NodeId, ParamSet, Reduction, Tape, Tensor};
use phonolm::tokenizer::{build_joint_vocab, train_bpe, BpeMode, JointVocabulary, TokenId, TokenType, MASK, MAX_PHONEME_VOCAB};
use phonolm::trainer::{encode_records, finetune, predict_records, pretrain, Checkpoint, Experiment, PhonemeSource, RunConfig, RunMode, Session};

// Pinned tolerances.
const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const MASK_TOKENS: usize = 100_000;
const SELECTION_TOL: f64 = 0.005;
const SPLIT_TOL: f64 = 0.01;
const WER_BUDGET: Duration = Duration::from_secs(300);
const WER_SAMPLED_PAIRS: usize = 100_000;
const WER_FLOOR: f64 = 0.05;
const WER_CEILING: f64 = 0.40;
const MEAN_WER_RANGE: (f64, f64) = (0.28, 0.33);
const ROUND_TRIP_LINES: usize = 10_000;
const MECHANISM_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MECHANISM_REQUIRED: usize = 4;
const JOINT_MARGIN: f64 = 0.03;
const RUN_BUDGET: Duration = Duration::from_secs(15 * 60);
const OVERFIT_SAMPLES: usize = 64;
const OVERFIT_STEPS: u64 = 200;

type Check = fn(&mut Context) -> Result<String, String>;

/// Results shared between criteria (the mechanism runs feed two of them).
#[derive(Default)]
struct Context {
    study: Option<Vec<SeedResult>>,
}

struct SeedResult {
    seed: u64,
    accuracy: HashMap<&'static str, f64>,
    buckets: HashMap<&'static str, [Option<f64>; 4]>,
    seconds: HashMap<&'static str, f64>,
    masked_word_joint: f64,
    masked_word_alone: f64,
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal(&mut rng)).collect()).unwrap()
}

fn param_set(entries: &[(&str, &[usize])]) -> ParamSet<f64> {
    let mut ps = ParamSet::new();
    for (i, (name, shape)) in entries.iter().enumerate() {
        ps.insert(*name, random(shape, 100 + i as u64));
    }
    ps
}

fn project(t: &mut Tape<'_, f64>, x: NodeId, seed: u64) -> phonolm::Result<NodeId> {
    let shape = t.value(x).shape().to_vec();
    let w = t.constant(random(&shape, seed));
    let y = t.mul(x, w)?;
    Ok(t.sum_all(y))
}

fn toy_vocab() -> JointVocabulary {
    let words = ["the cat sat on the mat", "a dog ran to the cat", "the bird sang"];
    let phones = ["DH AH | K AE T | S AE T", "AH | D AO G | R AE N", "DH AH | B ER D"];
    build_joint_vocab(
        train_bpe(&words, 8, BpeMode::Word).unwrap(),
        train_bpe(&phones, 6, BpeMode::Phoneme).unwrap(),
    )
    .unwrap()
}

fn toy_config(vocab: &JointVocabulary) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.size(),
        hidden_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 12,
        max_positions: 48,
        seed: 3,
        ..ModelConfig::default()
    }
}

/// Two jointly masked rows, each with word and phoneme targets.
fn toy_rows(vocab: &JointVocabulary) -> Vec<MaskedRow> {
    let inputs = [("the cat sat", "DH AH | K AE T | S AE T"), ("a dog ran", "AH | D AO G | R AE N")];
    inputs
        .iter()
        .enumerate()
        .map(|(i, (w, p))| {
            let seq = assemble_sequence(&vocab.encode_words(w), &vocab.encode_phoneme_str(p), 64).unwrap();
            (0..1000u64)
                .map(|s| apply_masking(&seq, vocab, 0.3, s * 31 + i as u64))
                .find(|r| !r.mask_positions_word.is_empty() && !r.mask_positions_phoneme.is_empty())
                .unwrap()
        })
        .collect()
}

fn gradient_suite(_: &mut Context) -> Result<String, String> {
    let start = Instant::now();
    type Case = (&'static str, ParamSet<f64>, Box<dyn Fn(&mut Tape<'_, f64>) -> phonolm::Result<NodeId>>);
    let cases: Vec<Case> = vec![
        (
            "matmul",
            param_set(&[("a", &[3, 4]), ("b", &[4, 5])]),
            Box::new(|t| {
                let (a, b) = (t.param_by_name("a")?, t.param_by_name("b")?);
                let y = t.matmul(a, b)?;
                project(t, y, 1)
            }),
        ),
        (
            "matmul_nt",
            param_set(&[("a", &[3, 4]), ("b", &[6, 4])]),
            Box::new(|t| {
                let (a, b) = (t.param_by_name("a")?, t.param_by_name("b")?);
                let y = t.matmul_nt(a, b)?;
                project(t, y, 2)
            }),
        ),
        (
            "add/mul/bias/scale",
            param_set(&[("a", &[3, 4]), ("b", &[3, 4]), ("r", &[4])]),
            Box::new(|t| {
                let (a, b, r) = (t.param_by_name("a")?, t.param_by_name("b")?, t.param_by_name("r")?);
                let s = t.add(a, b)?;
                let m = t.mul(s, b)?;
                let m = t.add_row(m, r)?;
                let m = t.scale(m, -0.7);
                project(t, m, 3)
            }),
        ),
        (
            "gelu",
            param_set(&[("a", &[5, 6])]),
            Box::new(|t| {
                let a = t.param_by_name("a")?;
                let y = t.gelu(a);
                project(t, y, 4)
            }),
        ),
        (
            "softmax",
            param_set(&[("a", &[4, 7])]),
            Box::new(|t| {
                let a = t.param_by_name("a")?;
                let y = t.softmax(a);
                project(t, y, 5)
            }),
        ),
        (
            "layer_norm",
            param_set(&[("x", &[4, 8]), ("g", &[8]), ("b", &[8])]),
            Box::new(|t| {
                let (x, g, b) = (t.param_by_name("x")?, t.param_by_name("g")?, t.param_by_name("b")?);
                let y = t.layer_norm(x, g, b, 1e-5)?;
                project(t, y, 6)
            }),
        ),
        (
            "gather/select",
            param_set(&[("table", &[6, 3])]),
            Box::new(|t| {
                let table = t.param_by_name("table")?;
                let g = t.gather(table, &[0, 2, 2, 5, 1])?;
                let s = t.select_rows(g, &[4, 1, 1, 0])?;
                project(t, s, 7)
            }),
        ),
        (
            "dropout",
            param_set(&[("a", &[3, 3])]),
            Box::new(|t| {
                let a = t.param_by_name("a")?;
                let y = t.dropout(a, vec![0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0])?;
                project(t, y, 8)
            }),
        ),
        (
            "cross_entropy(sum)",
            param_set(&[("l", &[5, 9])]),
            Box::new(|t| {
                let l = t.param_by_name("l")?;
                t.cross_entropy(l, &[0, 8, 3, 3, 1], Reduction::Sum)
            }),
        ),
        (
            "cross_entropy(mean)",
            param_set(&[("l", &[5, 9])]),
            Box::new(|t| {
                let l = t.param_by_name("l")?;
                t.cross_entropy(l, &[0, 8, 3, 3, 1], Reduction::Mean)
            }),
        ),
        (
            "attention",
            param_set(&[("qkv", &[10, 18])]),
            Box::new(|t| {
                let qkv = t.param_by_name("qkv")?;
                let a = t.attention(qkv, 2, 5, 2, &[5, 3])?;
                project(t, a, 9)
            }),
        ),
    ];
    let mut worst = (0.0f64, String::new());
    let mut coords = 0;
    for (name, mut ps, f) in cases {
        let r = gradient_check(&mut ps, &[], |t| f(t), GRAD_H, 7).map_err(e2s)?;
        coords += r.coords_checked;
        if r.max_relative_error >= worst.0 {
            worst = (r.max_relative_error, name.to_string());
        }
    }
    // Full three-term pretraining loss on a 2-layer toy encoder.
    let vocab = toy_vocab();
    let cfg = toy_config(&vocab);
    let mut model = Model::<f64>::new(cfg.clone()).map_err(e2s)?;
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        if name.ends_with("weight") || (name.starts_with("embeddings.") && !name.contains(".ln.")) {
            for x in model.params.get_mut(id).data_mut() {
                *x *= 10.0;
            }
        }
    }
    let rows = toy_rows(&vocab);
    let r = gradient_check(
        &mut model.params,
        &[],
        |t| Ok(joint_pretrain_loss(t, &cfg, &rows, Objective::Joint, &mut None)?.unwrap().total),
        GRAD_H,
        11,
    )
    .map_err(e2s)?;
    coords += r.coords_checked;
    if r.max_relative_error >= worst.0 {
        worst = (r.max_relative_error, "joint pretraining loss".into());
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "max relative error {:.2e} ({}) over {coords} coordinates, tolerance {GRAD_TOL:.0e}; {:.1}s of {}s",
        worst.0,
        worst.1,
        elapsed.as_secs_f64(),
        GRAD_BUDGET.as_secs()
    );
    ensure(worst.0 < GRAD_TOL && elapsed < GRAD_BUDGET, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------------ masking

fn synthetic_text(n: usize, seed: u64) -> (Vec<String>, Vec<String>) {
    let lex = Lexicon::builtin();
    let text: Vec<String> = SyntheticTask::from_lexicon(&lex, 4, 25, 1500).generate(n, seed).into_iter().map(|s| s.text).collect();
    let phones = text.iter().map(|t| render_phones(&lex.g2p(t))).collect();
    (text, phones)
}

fn masking_statistics(_: &mut Context) -> Result<String, String> {
    let (text, phones) = synthetic_text(2000, 21);
    let vocab = build_joint_vocab(
        train_bpe(&text, 500, BpeMode::Word).map_err(e2s)?,
        train_bpe(&phones, 200, BpeMode::Phoneme).map_err(e2s)?,
    )
    .map_err(e2s)?;
    let (mut tokens, mut selected, mut mismatched) = (0usize, 0usize, 0usize);
    let mut actions = [0usize; 3];
    for (i, (t, p)) in text.iter().zip(&phones).cycle().enumerate() {
        if tokens >= MASK_TOKENS {
            break;
        }
        let seq = assemble_sequence(&vocab.encode_words(t), &vocab.encode_phoneme_str(p), 512).map_err(e2s)?;
        tokens += seq.word_span.len() + seq.phoneme_span.len();
        let row = apply_masking(&seq, &vocab, MASK_PROB, i as u64);
        selected += row.actions.len();
        for (k, (pos, original)) in row.targets().into_iter().enumerate() {
            let a = row.actions[k];
            actions[a as usize] += 1;
            if a == MaskAction::Random && vocab.type_of(row.masked_ids[pos]) != vocab.type_of(original) {
                mismatched += 1;
            }
            if a == MaskAction::Mask && row.masked_ids[pos] != MASK {
                return Err(format!("MASK action left id {} at {pos}", row.masked_ids[pos]));
            }
        }
    }
    let rate = selected as f64 / tokens as f64;
    let share = |n: usize| n as f64 / selected as f64;
    let (m, k, r) = (share(actions[0]), share(actions[1]), share(actions[2]));
    let detail = format!(
        "{tokens} tokens: selected {:.2}%, split {:.1}/{:.1}/{:.1}, {mismatched} of {} replacements off-type",
        100.0 * rate,
        100.0 * m,
        100.0 * k,
        100.0 * r,
        actions[2]
    );
    ensure(
        (rate - 0.15).abs() <= SELECTION_TOL
            && (m - 0.8).abs() <= SPLIT_TOL
            && (k - 0.1).abs() <= SPLIT_TOL
            && (r - 0.1).abs() <= SPLIT_TOL
            && mismatched == 0
            && actions[2] > 0,
        || detail.clone(),
    )?;
    Ok(detail)
}

// ------------------------------------------------------------------- layout

fn layout_exactness(_: &mut Context) -> Result<String, String> {
    let (w, p): (Vec<TokenId>, Vec<TokenId>) = ((10..12).collect(), (40..43).collect());
    let seq = assemble_sequence(&w, &p, 64).map_err(e2s)?;
    ensure(seq.position_ids == [0, 1, 2, 3, 0, 1, 2, 3], || format!("positions {:?}", seq.position_ids))?;
    ensure(seq.type_ids == [0, 0, 0, 0, 1, 1, 1, 1], || format!("types {:?}", seq.type_ids))?;
    let word_only = assemble_sequence(&w, &[], 64).map_err(e2s)?;
    ensure(word_only.len() == 4 && word_only.type_ids.iter().all(|&t| t == WORD_TYPE), || "word-only layout".into())?;
    let long_w: Vec<TokenId> = (100..130).collect();
    let long_p: Vec<TokenId> = (200..260).collect();
    let cut = assemble_sequence(&long_w, &long_p, 48).map_err(e2s)?;
    ensure((cut.word_span.len(), cut.phoneme_span.len()) == (15, 30), || {
        format!("truncated to {}/{}", cut.word_span.len(), cut.phoneme_span.len())
    })?;
    let mut rng = rng_from_seed(5);
    let mut checked = 3;
    for _ in 0..2000 {
        let (nw, np, max_len) = (below(&mut rng, 60), 1 + below(&mut rng, 60), 4 + below(&mut rng, 100));
        let w: Vec<TokenId> = (0..nw as u32).map(|i| 10 + i).collect();
        let p: Vec<TokenId> = (0..np as u32).map(|i| 500 + i).collect();
        let s = assemble_sequence(&w, &p, max_len).map_err(e2s)?;
        let ps = s.phoneme_span.start;
        let restart = s.position_ids[ps..].iter().enumerate().all(|(k, &pos)| pos as usize == k);
        let types = (0..s.len()).all(|i| s.type_ids[i] == if i < ps { WORD_TYPE } else { PHONEME_TYPE });
        ensure(restart && types && s.len() <= max_len, || format!("random layout {nw}/{np}/{max_len}"))?;
        checked += 1;
    }
    Ok(format!("{checked} layouts: phoneme positions restart at 0, types split at the block boundary, 30/60 -> 15/30 at 48"))
}

// ----------------------------------------------------------- loss structure

fn loss_structure(_: &mut Context) -> Result<String, String> {
    let vocab = toy_vocab();
    let cfg = toy_config(&vocab);
    let model = Model::<f64>::new(cfg.clone()).map_err(e2s)?;
    let rows = toy_rows(&vocab);
    let breakdown = |mode: RunMode| -> Result<(f64, phonolm::model::LossBreakdown), String> {
        let mut tape = Tape::new(&model.params);
        let loss = joint_pretrain_loss(&mut tape, &cfg, &rows, mode.objective().unwrap(), &mut None).map_err(e2s)?.unwrap();
        Ok((tape.value(loss.total).item(), loss.breakdown))
    };
    let (total, joint) = breakdown(RunMode::PretrainJoint)?;
    let sum = joint.word_mlm_loss + joint.phoneme_mlm_loss + joint.joint_mlm_loss;
    ensure(total == sum && joint.total == sum, || format!("total {total} vs sum {sum}"))?;
    ensure(joint.joint_mlm_loss > 0.0 && joint.phoneme_mlm_loss > 0.0, || "joint terms empty".into())?;
    let (_, a3) = breakdown(RunMode::PretrainJointNoJointLoss)?;
    ensure(a3.joint_mlm_loss == 0.0 && a3.word_mlm_loss == joint.word_mlm_loss, || format!("A3 joint term {}", a3.joint_mlm_loss))?;
    let (_, b2) = breakdown(RunMode::PretrainWordOnly)?;
    ensure(b2.phoneme_mlm_loss == 0.0 && b2.joint_mlm_loss == 0.0, || {
        format!("B2 phoneme {} joint {}", b2.phoneme_mlm_loss, b2.joint_mlm_loss)
    })?;
    Ok(format!(
        "total {total:.6} = {:.6} + {:.6} + {:.6} exactly; A3 joint term 0, B2 phoneme and joint terms 0",
        joint.word_mlm_loss, joint.phoneme_mlm_loss, joint.joint_mlm_loss
    ))
}

// --------------------------------------------------------------------- WER

fn recursive_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => (recursive_distance(ra, rb) + usize::from(x != y))
            .min(recursive_distance(ra, b) + 1)
            .min(recursive_distance(a, rb) + 1),
    }
}

fn sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| (0..3u8).map(move |c| [s.as_slice(), &[c]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn wer_oracle_filter_and_calibration(_: &mut Context) -> Result<String, String> {
    let start = Instant::now();
    let render = |s: &[u8]| s.iter().map(|&c| ["a", "b", "c"][c as usize]).collect::<Vec<_>>().join(" ");
    let all = sequences(6);
    let refs: Vec<&Vec<u8>> = all.iter().filter(|s| !s.is_empty()).collect();
    let mut pairs = 0usize;
    // Exhaustive over short pairs, sampled over the rest.
    let short: Vec<&Vec<u8>> = all.iter().filter(|s| s.len() <= 3).collect();
    for r in short.iter().filter(|s| !s.is_empty()) {
        for h in &short {
            let expected = recursive_distance(r, h) as f64 / r.len() as f64;
            ensure(compute_wer(&render(r), &render(h)).map_err(e2s)? == expected, || format!("{r:?} vs {h:?}"))?;
            pairs += 1;
        }
    }
    let mut rng = rng_from_seed(2024);
    for _ in 0..WER_SAMPLED_PAIRS {
        let r = refs[below(&mut rng, refs.len())];
        let h = &all[below(&mut rng, all.len())];
        let expected = recursive_distance(r, h) as f64 / r.len() as f64;
        ensure(compute_wer(&render(r), &render(h)).map_err(e2s)? == expected, || format!("{r:?} vs {h:?}"))?;
        pairs += 1;
    }
    let lex = Lexicon::builtin();
    let sources: Vec<SourceSentence> = SyntheticTask::from_lexicon(&lex, 4, 25, 1500).generate(1000, 11);
    let cfg = NoiseConfig {
        seed: 11,
        ..NoiseConfig::default()
    };
    let (records, stats) = build_corpus(&sources, &cfg, &lex, &ConfusionClasses::builtin()).map_err(e2s)?;
    let outside = records
        .iter()
        .filter(|r| !(WER_FLOOR..=WER_CEILING).contains(&r.wer.unwrap_or(-1.0)))
        .count();
    let elapsed = start.elapsed();
    let detail = format!(
        "{pairs} pairs match the recursive oracle; {} records, {outside} outside [{WER_FLOOR}, {WER_CEILING}]; mean WER {:.4} (target range [{}, {}]); {:.1}s",
        records.len(),
        stats.mean_wer,
        MEAN_WER_RANGE.0,
        MEAN_WER_RANGE.1,
        elapsed.as_secs_f64()
    );
    ensure(
        outside == 0 && (MEAN_WER_RANGE.0..=MEAN_WER_RANGE.1).contains(&stats.mean_wer) && elapsed < WER_BUDGET,
        || detail.clone(),
    )?;
    Ok(detail)
}

// --------------------------------------------------------------------- BPE

fn bpe(_: &mut Context) -> Result<String, String> {
    let (text, phones) = synthetic_text(ROUND_TRIP_LINES, 17);
    let vocab = build_joint_vocab(
        train_bpe(&text, 2000, BpeMode::Word).map_err(e2s)?,
        train_bpe(&phones, 5000, BpeMode::Phoneme).map_err(e2s)?,
    )
    .map_err(e2s)?;
    let units = vocab.phoneme_model().len();
    let mut mismatches = 0;
    for (t, p) in text.iter().zip(&phones) {
        let w = vocab.encode(t, BpeMode::Word);
        let q = vocab.encode(p, BpeMode::Phoneme);
        let typed = w.iter().all(|&id| vocab.type_of(id) == Some(TokenType::Word)) && q.iter().all(|&id| vocab.type_of(id) == Some(TokenType::Phoneme));
        if !typed || vocab.decode(&w).map_err(e2s)? != *t || vocab.decode(&q).map_err(e2s)? != *p {
            mismatches += 1;
        }
    }
    let detail = format!("{units} phoneme units (cap {MAX_PHONEME_VOCAB}); {mismatches} round-trip mismatches over {} word and phoneme lines", text.len());
    ensure(units == MAX_PHONEME_VOCAB && mismatches == 0, || detail.clone())?;
    Ok(detail)
}

// --------------------------------------------------------------- mechanism

const STUDY_ROWS: [Experiment; 3] = [Experiment::Joint, Experiment::B2, Experiment::A1];

/// Masked-word accuracy of the joint-pretrained encoder with and without the
/// phoneme block in context, on the same mask realization of the test set.
fn masked_word_accuracy(ckpt: &Checkpoint, records: &[CorpusRecord], vocab: &JointVocabulary, lexicon: &Lexicon, max_len: usize) -> Result<(f64, f64), String> {
    let data = encode_records(records, vocab, lexicon, RunMode::PretrainJoint, PhonemeSource::Independent, false).map_err(e2s)?;
    let (mut joint_rows, mut word_rows) = (Vec::new(), Vec::new());
    for (i, r) in data.iter().enumerate() {
        let seq = r.sequence(RunMode::PretrainJoint.layout(), max_len).map_err(e2s)?;
        let mut row = apply_masking(&seq, vocab, MASK_PROB, 7_000 + i as u64);
        if row.mask_positions_word.is_empty() {
            continue;
        }
        word_rows.push(row.word_view());
        let n_word = row.mask_positions_word.len();
        row.mask_positions_phoneme.clear();
        row.actions.truncate(n_word);
        joint_rows.push(row);
    }
    let mut hits = [0.0, 0.0];
    let mut total = 0usize;
    for (j, w) in joint_rows.chunks(64).zip(word_rows.chunks(64)) {
        let n: usize = j.iter().map(|r| r.mask_positions_word.len()).sum();
        hits[0] += masked_prediction_accuracy(&ckpt.model, j).map_err(e2s)?.unwrap_or(0.0) * n as f64;
        hits[1] += masked_prediction_accuracy(&ckpt.model, w).map_err(e2s)?.unwrap_or(0.0) * n as f64;
        total += n;
    }
    Ok((hits[0] / total as f64, hits[1] / total as f64))
}

fn run_study(ctx: &mut Context) -> Result<&[SeedResult], String> {
    if ctx.study.is_none() {
        let cfg = StudyConfig::default();
        let mut results = Vec::new();
        for seed in MECHANISM_SEEDS {
            let data = prepare(&cfg, seed).map_err(e2s)?;
            let (runs, pretrains) = run_experiments(&data, &cfg, seed, &STUDY_ROWS).map_err(e2s)?;
            let pre_seconds: HashMap<RunMode, f64> = pretrains.iter().map(|p| (p.mode, p.seconds)).collect();
            let joint = pretrains.iter().find(|p| p.mode == RunMode::PretrainJoint).ok_or("no joint pretraining run")?;
            let (masked_word_joint, masked_word_alone) = masked_word_accuracy(&joint.checkpoint, &data.test, &data.vocab, &data.lexicon, cfg.max_len)?;
            let mut result = SeedResult {
                seed,
                accuracy: HashMap::new(),
                buckets: HashMap::new(),
                seconds: HashMap::new(),
                masked_word_joint,
                masked_word_alone,
            };
            for run in &runs {
                let name = run.experiment.name();
                result.accuracy.insert(name, run.report.overall.accuracy);
                result.buckets.insert(name, WerBucket::ALL.map(|b| run.report.bucket(b).accuracy));
                let pre = run.experiment.pretrain_mode().map_or(0.0, |m| pre_seconds[&m]);
                result.seconds.insert(name, pre + run.finetune_seconds);
            }
            println!(
                "       seed {seed}: Joint {:.4}  B2 {:.4}  A1 {:.4}  (slowest row {:.0}s)",
                result.accuracy["Joint"],
                result.accuracy["B2"],
                result.accuracy["A1"],
                result.seconds.values().cloned().fold(0.0, f64::max)
            );
            results.push(result);
        }
        ctx.study = Some(results);
    }
    Ok(ctx.study.as_deref().unwrap())
}

fn mechanism(ctx: &mut Context) -> Result<String, String> {
    let results = run_study(ctx)?;
    let mut passing = Vec::new();
    let mut notes = Vec::new();
    for r in results {
        let (pb, b2, a1) = (r.accuracy["Joint"], r.accuracy["B2"], r.accuracy["A1"]);
        let within_budget = r.seconds.values().all(|&s| s <= RUN_BUDGET.as_secs_f64());
        let ok = pb - b2 >= JOINT_MARGIN && a1 >= b2 && within_budget;
        notes.push(format!("s{}: {:+.1}/{:+.1}", r.seed, 100.0 * (pb - b2), 100.0 * (a1 - b2)));
        if ok {
            passing.push(r.seed);
        }
    }
    let mean = |f: &dyn Fn(&SeedResult) -> f64| results.iter().map(f).sum::<f64>() / results.len() as f64;
    let detail = format!(
        "{}/{} seeds hold (Joint-B2 >= {:.0} pts and A1 >= B2; need {MECHANISM_REQUIRED}); joint-B2 / A1-B2 points: {}; masked-word accuracy with phonemes in context {:.3} vs words alone {:.3}",
        passing.len(),
        results.len(),
        100.0 * JOINT_MARGIN,
        notes.join(", "),
        mean(&|r| r.masked_word_joint),
        mean(&|r| r.masked_word_alone)
    );
    ensure(passing.len() >= MECHANISM_REQUIRED, || detail.clone())?;
    Ok(detail)
}

fn bucket_trend(ctx: &mut Context) -> Result<String, String> {
    let results = run_study(ctx)?;
    // Buckets 10-20, 20-30 and 30+ (index 0 is under 10%).
    let (mut passing, mut endpoints) = (0, 0);
    let mut notes = Vec::new();
    for r in results {
        let adv: Vec<Option<f64>> = (1..4)
            .map(|b| Some(r.buckets["Joint"][b]? - r.buckets["B2"][b]?))
            .collect();
        let ok = adv.iter().all(Option::is_some) && adv.windows(2).all(|w| w[0].unwrap() <= w[1].unwrap());
        let shown: Vec<String> = adv.iter().map(|a| a.map_or("n/a".into(), |a| format!("{:+.1}", 100.0 * a))).collect();
        notes.push(format!("s{}: {}", r.seed, shown.join("/")));
        passing += usize::from(ok);
        // Informational only: the weaker endpoint comparison is not the criterion.
        endpoints += usize::from(matches!((adv[0], adv[2]), (Some(lo), Some(hi)) if lo <= hi));
    }
    let detail = format!(
        "{passing}/{} seeds non-decreasing over 10-20/20-30/30+ (need {MECHANISM_REQUIRED}); advantage in points: {}; 30+ >= 10-20 alone in {endpoints}/{}",
        results.len(),
        notes.join(", "),
        results.len()
    );
    ensure(passing >= MECHANISM_REQUIRED, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------- training plumbing

struct Fixture {
    lexicon: Lexicon,
    vocab: JointVocabulary,
    records: Vec<CorpusRecord>,
}

fn fixture(n: usize, seed: u64) -> Result<Fixture, String> {
    let lexicon = Lexicon::builtin();
    let sources = SyntheticTask::from_lexicon(&lexicon, 4, 3, 60).generate(n * 25, seed);
    let noise = NoiseConfig {
        seed,
        pilot_size: 200,
        ..NoiseConfig::default()
    };
    let (mut records, _) = build_corpus(&sources, &noise, &lexicon, &ConfusionClasses::builtin()).map_err(e2s)?;
    ensure(records.len() >= n, || format!("only {} records", records.len()))?;
    records.truncate(n);
    let words: Vec<&str> = records.iter().flat_map(|r| [r.asr.as_deref().unwrap_or(""), r.clean.as_str()]).collect();
    let phones: Vec<&str> = records.iter().filter_map(|r| r.phoneme.as_deref()).collect();
    let vocab = build_joint_vocab(
        train_bpe(&words, 300, BpeMode::Word).map_err(e2s)?,
        train_bpe(&phones, 100, BpeMode::Phoneme).map_err(e2s)?,
    )
    .map_err(e2s)?;
    Ok(Fixture { lexicon, vocab, records })
}

fn small_run(mode: RunMode, epochs: usize, max_steps: u64) -> RunConfig {
    RunConfig {
        mode,
        epochs: Some(epochs),
        max_steps: Some(max_steps),
        batch_size: Some(16),
        lr: Some(1e-3),
        seed: 9,
        model: ModelConfig {
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            max_positions: 128,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    }
}

fn resume_is_bitwise(f: &Fixture, mode: RunMode, total: u64, split: u64) -> Result<bool, String> {
    let cfg = small_run(mode, 10, total);
    let data = encode_records(&f.records, &f.vocab, &f.lexicon, mode, cfg.phoneme_source, !mode.is_pretrain()).map_err(e2s)?;
    let model = || -> Result<Model<f32>, String> {
        let mut m = Model::<f32>::new(ModelConfig {
            vocab_size: f.vocab.size(),
            seed: cfg.seed,
            ..cfg.model.clone()
        })
        .map_err(e2s)?;
        if !mode.is_pretrain() {
            m.reset_classifier(4, 77).map_err(e2s)?;
        }
        Ok(m)
    };
    let cut = data.len() * 3 / 4;
    let session = |m| {
        if mode.is_pretrain() {
            Session::pretrain(&data, &f.vocab, &cfg, m)
        } else {
            Session::finetune(&data[..cut], &data[cut..], &cfg, m)
        }
        .map_err(e2s)
    };
    let mut straight = session(model()?)?;
    straight.run_steps(total).map_err(e2s)?;
    let mut first = session(model()?)?;
    first.run_steps(split).map_err(e2s)?;
    let bytes = first.checkpoint().to_bytes().map_err(e2s)?;
    let mut second = session(model()?)?;
    second.restore(&Checkpoint::from_bytes(&bytes).map_err(e2s)?).map_err(e2s)?;
    second.run_steps(total - split).map_err(e2s)?;
    Ok(straight.is_finished() && second.is_finished() && straight.checkpoint().bitwise_eq(&second.checkpoint()))
}

fn reproducibility_and_resume(_: &mut Context) -> Result<String, String> {
    let f = fixture(150, 4)?;
    let cfg = small_run(RunMode::FinetuneJoint, 5, 30);
    let (train, test) = f.records.split_at(100);
    let a = finetune(None, train, None, Some(test), &f.vocab, &f.lexicon, &cfg).map_err(e2s)?;
    let b = finetune(None, train, None, Some(test), &f.vocab, &f.lexicon, &cfg).map_err(e2s)?;
    let (ra, rb) = (a.test.unwrap().to_json().map_err(e2s)?, b.test.unwrap().to_json().map_err(e2s)?);
    ensure(ra == rb && a.checkpoint.bitwise_eq(&b.checkpoint), || "same seed gave different runs".into())?;
    let pre = pretrain(&f.records, &f.vocab, &f.lexicon, &small_run(RunMode::PretrainJoint, 1, 6), None).map_err(e2s)?;
    let pre2 = pretrain(&f.records, &f.vocab, &f.lexicon, &small_run(RunMode::PretrainJoint, 1, 6), None).map_err(e2s)?;
    ensure(pre.checkpoint.bitwise_eq(&pre2.checkpoint), || "same seed gave different pretraining".into())?;
    let resumed_pre = resume_is_bitwise(&f, RunMode::PretrainJoint, 20, 7)?;
    let resumed_ft = resume_is_bitwise(&f, RunMode::FinetuneJoint, 20, 9)?;
    let detail = format!("repeated runs identical; resumed pretraining bitwise {resumed_pre}, resumed fine-tuning bitwise {resumed_ft}");
    ensure(resumed_pre && resumed_ft, || detail.clone())?;
    Ok(detail)
}

fn overfit(_: &mut Context) -> Result<String, String> {
    let f = fixture(OVERFIT_SAMPLES, 10)?;
    let cfg = small_run(RunMode::FinetuneJoint, 50, OVERFIT_STEPS);
    let out = finetune(None, &f.records, Some(&f.records), None, &f.vocab, &f.lexicon, &cfg).map_err(e2s)?;
    let preds = predict_records(&out.checkpoint, &f.records, &f.vocab, &f.lexicon).map_err(e2s)?;
    let correct = preds.iter().zip(&f.records).filter(|(p, r)| Some(**p) == r.label).count();
    let detail = format!("{correct}/{OVERFIT_SAMPLES} train records correct after {} steps", out.steps.len());
    ensure(correct == OVERFIT_SAMPLES && out.steps.len() as u64 <= OVERFIT_STEPS, || detail.clone())?;
    Ok(detail)
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("gradient-suite", gradient_suite),
        ("masking-statistics", masking_statistics),
        ("layout-exactness", layout_exactness),
        ("loss-structure", loss_structure),
        ("wer-oracle-filter-calibration", wer_oracle_filter_and_calibration),
        ("bpe", bpe),
        ("reproducibility-resume", reproducibility_and_resume),
        ("overfit-64", overfit),
        ("mechanism", mechanism),
        ("wer-bucket-trend", bucket_trend),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut ctx = Context::default();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut ctx)))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<30} {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<30} {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
