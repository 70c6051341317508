//! Shared transformer encoder, tied masked-LM head, three-pass joint loss and
//! the sequence classification head.
//!
//! All passes (word-only, phoneme-only, joint) run through one parameter set;
//! the tape hands out a single node per parameter, so every pass reads the
//! same storage and its gradients accumulate in one place.

use serde::{Deserialize, Serialize};

use crate::batcher::{collate_batch, MaskedJointBatch, MaskedRow};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal, rng_from_seed, uniform, Rng};
use crate::tensor::{NodeId, ParamSet, Reduction, Scalar, Tape, Tensor};
use crate::tokenizer::TokenId;

/// Epsilon of every layer normalization in the network.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Standard deviation of the normal initialization of weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub num_types: usize,
    pub dropout_rate: f64,
    /// Classes of the classification head; 0 when there is none.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            hidden_dim: 128,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 512,
            max_positions: 256,
            num_types: 2,
            dropout_rate: 0.1,
            num_classes: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, hidden_dim, num_heads and ffn_dim must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.num_types != 2 {
            return fail(format!("num_types must be 2, got {}", self.num_types));
        }
        if self.max_positions < 4 {
            return fail("max_positions must be at least 4".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f, v) = (self.hidden_dim, self.ffn_dim, self.vocab_size);
        let mut out = vec![
            ("embeddings.token".to_string(), vec![v, h]),
            ("embeddings.position".to_string(), vec![self.max_positions, h]),
            ("embeddings.type".to_string(), vec![self.num_types, h]),
            ("embeddings.ln.gamma".to_string(), vec![h]),
            ("embeddings.ln.beta".to_string(), vec![h]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("attn.qkv.weight"), vec![h, 3 * h]),
                (p("attn.qkv.bias"), vec![3 * h]),
                (p("attn.out.weight"), vec![h, h]),
                (p("attn.out.bias"), vec![h]),
                (p("attn.ln.gamma"), vec![h]),
                (p("attn.ln.beta"), vec![h]),
                (p("ffn.in.weight"), vec![h, f]),
                (p("ffn.in.bias"), vec![f]),
                (p("ffn.out.weight"), vec![f, h]),
                (p("ffn.out.bias"), vec![h]),
                (p("ffn.ln.gamma"), vec![h]),
                (p("ffn.ln.beta"), vec![h]),
            ]);
        }
        out.extend([
            ("encoder.ln.gamma".to_string(), vec![h]),
            ("encoder.ln.beta".to_string(), vec![h]),
            ("mlm.dense.weight".to_string(), vec![h, h]),
            ("mlm.dense.bias".to_string(), vec![h]),
            ("mlm.ln.gamma".to_string(), vec![h]),
            ("mlm.ln.beta".to_string(), vec![h]),
            ("mlm.bias".to_string(), vec![v]),
        ]);
        if self.num_classes > 0 {
            out.extend([
                ("classifier.weight".to_string(), vec![h, self.num_classes]),
                ("classifier.bias".to_string(), vec![self.num_classes]),
            ]);
        }
        out
    }
}

fn init_tensor<T: Scalar>(name: &str, shape: &[usize], seed: u64) -> Tensor<T> {
    if name.ends_with(".gamma") {
        return Tensor::filled(shape, T::one());
    }
    if name.ends_with(".beta") || name.ends_with("bias") {
        return Tensor::zeros(shape);
    }
    let mut rng = rng_from_seed(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(INIT_STD * normal(&mut rng))).collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

/// FNV-1a, used to key per-parameter initialization streams by name.
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Random initialization: normal(0, 0.02) weights, zero biases, unit gains.
    /// Each tensor draws from its own stream keyed by `config.seed` and its name.
    pub fn new(config: ModelConfig) -> Result<Model<T>> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in config.parameter_shapes() {
            let t = init_tensor(&name, &shape, derive_seed(config.seed, name_hash(&name)));
            params.insert(name, t);
        }
        Ok(Model { config, params })
    }

    /// Installs a freshly initialized classification head of `num_classes`.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("a classifier needs at least one class".into()));
        }
        let h = self.config.hidden_dim;
        for (name, shape) in [("classifier.weight", vec![h, num_classes]), ("classifier.bias", vec![num_classes])] {
            let t = init_tensor(name, &shape, derive_seed(seed, name_hash(name)));
            self.params.insert(name, t);
        }
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Replaces the token embedding table with an externally trained one.
    pub fn import_token_embeddings(&mut self, table: Tensor<T>) -> Result<()> {
        let want = [self.config.vocab_size, self.config.hidden_dim];
        if table.shape() != want {
            return Err(Error::Shape(format!(
                "embedding table {:?}, model expects {want:?}",
                table.shape()
            )));
        }
        if !table.all_finite() {
            return Err(Error::NonFinite("imported embedding table".into()));
        }
        let id = self.params.require("embeddings.token")?;
        *self.params.get_mut(id) = table;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Checks that every tensor has the shape the configuration implies.
    pub fn check_shapes(&self) -> Result<()> {
        for (name, shape) in self.config.parameter_shapes() {
            let t = self
                .params
                .by_name(&name)
                .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointShape {
                    name,
                    found: t.shape().to_vec(),
                    expected: shape,
                });
            }
        }
        Ok(())
    }
}

/// Padded encoder input borrowed from a collated batch.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub ids: &'a [TokenId],
    pub positions: &'a [u32],
    pub types: &'a [u8],
    pub lengths: &'a [usize],
    pub batch_size: usize,
    pub seq_len: usize,
}

impl<'a> From<&'a MaskedJointBatch> for EncoderInput<'a> {
    fn from(b: &'a MaskedJointBatch) -> Self {
        EncoderInput {
            ids: &b.masked_ids,
            positions: &b.position_ids,
            types: &b.type_ids,
            lengths: &b.lengths,
            batch_size: b.batch_size,
            seq_len: b.seq_len,
        }
    }
}

/// Dropout is active exactly when a generator is supplied.
pub type DropoutRng<'r> = Option<&'r mut Rng>;

fn dropout<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, rate: f64, rng: &mut DropoutRng<'_>) -> Result<NodeId> {
    let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let n = tape.value(x).len();
    let mask = (0..n)
        .map(|_| if uniform(rng) < rate { T::zero() } else { keep })
        .collect();
    tape.dropout(x, mask)
}

fn linear<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = tape.param_by_name(&format!("{prefix}.weight"))?;
    let b = tape.param_by_name(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<'_, T>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let g = tape.param_by_name(&format!("{prefix}.gamma"))?;
    let b = tape.param_by_name(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// Sum of token, position and type embeddings before normalization, `[B*L, H]`.
pub fn embedding_sum<T: Scalar>(tape: &mut Tape<'_, T>, cfg: &ModelConfig, input: EncoderInput<'_>) -> Result<NodeId> {
    let n = input.batch_size * input.seq_len;
    if input.ids.len() != n || input.positions.len() != n || input.types.len() != n {
        return Err(Error::Shape("encoder input arrays differ in length".into()));
    }
    if let Some(&p) = input.positions.iter().find(|&&p| p as usize >= cfg.max_positions) {
        return Err(Error::Input(format!(
            "position id {p} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
    let pos: Vec<usize> = input.positions.iter().map(|&i| i as usize).collect();
    let types: Vec<usize> = input.types.iter().map(|&i| i as usize).collect();
    let tok_table = tape.param_by_name("embeddings.token")?;
    let pos_table = tape.param_by_name("embeddings.position")?;
    let type_table = tape.param_by_name("embeddings.type")?;
    let t = tape.gather(tok_table, &ids)?;
    let p = tape.gather(pos_table, &pos)?;
    let y = tape.gather(type_table, &types)?;
    let tp = tape.add(t, p)?;
    tape.add(tp, y)
}

/// Embedding sum, embedding layer norm and dropout.
pub fn embed<T: Scalar>(tape: &mut Tape<'_, T>, cfg: &ModelConfig, input: EncoderInput<'_>, rng: &mut DropoutRng<'_>) -> Result<NodeId> {
    let sum = embedding_sum(tape, cfg, input)?;
    let x = layer_norm(tape, sum, "embeddings.ln")?;
    dropout(tape, x, cfg.dropout_rate, rng)
}

/// Intermediate nodes of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: NodeId,
    /// Attention node per layer; see [`Tape::attention_probs`].
    pub attention: Vec<NodeId>,
}

/// Post-layer-norm transformer encoder followed by a final layer norm.
/// Returns contextual states `[B*L, H]`.
pub fn encoder_forward<T: Scalar>(tape: &mut Tape<'_, T>, cfg: &ModelConfig, input: EncoderInput<'_>, rng: &mut DropoutRng<'_>) -> Result<EncoderOutput> {
    if input.lengths.len() != input.batch_size {
        return Err(Error::Shape("one length per batch row expected".into()));
    }
    let mut x = embed(tape, cfg, input, rng)?;
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let qkv = linear(tape, x, &format!("layer{l}.attn.qkv"))?;
        let a = tape.attention(qkv, input.batch_size, input.seq_len, cfg.num_heads, input.lengths)?;
        attention.push(a);
        let o = linear(tape, a, &format!("layer{l}.attn.out"))?;
        let o = dropout(tape, o, cfg.dropout_rate, rng)?;
        let r = tape.add(x, o)?;
        x = layer_norm(tape, r, &format!("layer{l}.attn.ln"))?;
        let f = linear(tape, x, &format!("layer{l}.ffn.in"))?;
        let f = tape.gelu(f);
        let f = linear(tape, f, &format!("layer{l}.ffn.out"))?;
        let f = dropout(tape, f, cfg.dropout_rate, rng)?;
        let r = tape.add(x, f)?;
        x = layer_norm(tape, r, &format!("layer{l}.ffn.ln"))?;
    }
    let states = layer_norm(tape, x, "encoder.ln")?;
    if !tape.value(states).all_finite() {
        return Err(Error::NonFinite("encoder activations".into()));
    }
    Ok(EncoderOutput { states, attention })
}

/// Logits over the whole joint vocabulary at the given flat positions:
/// dense, GELU, layer norm, then the projection tied to the token embeddings.
pub fn mlm_logits<T: Scalar>(tape: &mut Tape<'_, T>, states: NodeId, positions: &[usize]) -> Result<NodeId> {
    let x = tape.select_rows(states, positions)?;
    let x = linear(tape, x, "mlm.dense")?;
    let x = tape.gelu(x);
    let x = layer_norm(tape, x, "mlm.ln")?;
    let table = tape.param_by_name("embeddings.token")?;
    let logits = tape.matmul_nt(x, table)?;
    let bias = tape.param_by_name("mlm.bias")?;
    tape.add_row(logits, bias)
}

/// Which loss terms a pretraining step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Word, phoneme and joint terms.
    Joint,
    /// Word and phoneme terms; the joint term is fixed at 0.
    NoJoint,
    /// Word term only.
    WordOnly,
}

/// Summed cross-entropies of one step. `total` is `word + phoneme + joint`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub word_mlm_loss: f64,
    pub phoneme_mlm_loss: f64,
    pub joint_mlm_loss: f64,
    pub total: f64,
    pub word_targets: usize,
    pub phoneme_targets: usize,
    pub joint_targets: usize,
}

impl LossBreakdown {
    pub fn from_terms(word: f64, phoneme: f64, joint: f64) -> LossBreakdown {
        LossBreakdown {
            word_mlm_loss: word,
            phoneme_mlm_loss: phoneme,
            joint_mlm_loss: joint,
            total: word + phoneme + joint,
            ..LossBreakdown::default()
        }
    }
}

/// Recorded pretraining loss: the node to differentiate plus its breakdown.
#[derive(Clone, Debug)]
pub struct PretrainLoss {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// One masked-LM term: encodes `rows` and sums cross-entropy over all their
/// selected positions. `None` when the rows carry no targets.
pub fn mlm_term<T: Scalar>(tape: &mut Tape<'_, T>, cfg: &ModelConfig, rows: &[MaskedRow], rng: &mut DropoutRng<'_>) -> Result<Option<(NodeId, usize)>> {
    let batch = collate_batch(rows)?;
    let (positions, targets) = batch.all_positions();
    if targets.is_empty() {
        return Ok(None);
    }
    let enc = encoder_forward(tape, cfg, (&batch).into(), rng)?;
    let logits = mlm_logits(tape, enc.states, &positions)?;
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let loss = tape.cross_entropy(logits, &targets, Reduction::Sum)?;
    Ok(Some((loss, targets.len())))
}

/// The three-pass pretraining loss over jointly masked rows. Pass one sees the
/// word-only layout of the masked words, pass two the phoneme-only layout of
/// the masked phonemes, and pass three the full joint layout; all three share
/// the rows' single mask realization. Returns `None` (skip the step) when no
/// enabled term has a target.
pub fn joint_pretrain_loss<T: Scalar>(tape: &mut Tape<'_, T>, cfg: &ModelConfig, rows: &[MaskedRow], objective: Objective, rng: &mut DropoutRng<'_>) -> Result<Option<PretrainLoss>> {
    let word_rows: Vec<MaskedRow> = rows.iter().map(MaskedRow::word_view).collect();
    let word = mlm_term(tape, cfg, &word_rows, rng)?;
    let (phoneme, joint) = if objective == Objective::WordOnly {
        (None, None)
    } else {
        let phoneme_rows: Vec<MaskedRow> = rows.iter().map(MaskedRow::phoneme_view).collect();
        let phoneme = mlm_term(tape, cfg, &phoneme_rows, rng)?;
        let joint = if objective == Objective::Joint {
            mlm_term(tape, cfg, rows, rng)?
        } else {
            None
        };
        (phoneme, joint)
    };
    let terms = [word, phoneme, joint];
    let value = |t: &Option<(NodeId, usize)>| t.map_or(0.0, |(n, _)| Scalar::to_f64(tape.value(n).item()));
    let mut breakdown = LossBreakdown::from_terms(value(&terms[0]), value(&terms[1]), value(&terms[2]));
    breakdown.word_targets = terms[0].map_or(0, |t| t.1);
    breakdown.phoneme_targets = terms[1].map_or(0, |t| t.1);
    breakdown.joint_targets = terms[2].map_or(0, |t| t.1);
    let mut total: Option<NodeId> = None;
    for (node, _) in terms.iter().flatten() {
        total = Some(match total {
            None => *node,
            Some(acc) => tape.add(acc, *node)?,
        });
    }
    Ok(total.map(|total| PretrainLoss { total, breakdown }))
}

/// Class logits `[B, C]` from the final state at each row's BOS position.
pub fn classify_forward<T: Scalar>(tape: &mut Tape<'_, T>, cfg: &ModelConfig, input: EncoderInput<'_>, rng: &mut DropoutRng<'_>) -> Result<NodeId> {
    if cfg.num_classes == 0 {
        return Err(Error::Config("model has no classification head".into()));
    }
    let enc = encoder_forward(tape, cfg, input, rng)?;
    let bos: Vec<usize> = (0..input.batch_size).map(|b| b * input.seq_len).collect();
    let pooled = tape.select_rows(enc.states, &bos)?;
    let pooled = dropout(tape, pooled, cfg.dropout_rate, rng)?;
    linear(tape, pooled, "classifier")
}

/// Argmax class per row in evaluation mode.
pub fn predict<T: Scalar>(model: &Model<T>, rows: &[MaskedRow]) -> Result<Vec<u32>> {
    let batch = collate_batch(rows)?;
    let mut tape = Tape::new(&model.params);
    let logits = classify_forward(&mut tape, &model.config, (&batch).into(), &mut None)?;
    Ok(argmax_rows(tape.value(logits)))
}

pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<u32> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Fraction of selected positions whose original token is the argmax of the
/// masked-LM logits, computed in evaluation mode. `None` without targets.
pub fn masked_prediction_accuracy<T: Scalar>(model: &Model<T>, rows: &[MaskedRow]) -> Result<Option<f64>> {
    let batch = collate_batch(rows)?;
    let (positions, targets) = batch.all_positions();
    if targets.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new(&model.params);
    let enc = encoder_forward(&mut tape, &model.config, (&batch).into(), &mut None)?;
    let logits = mlm_logits(&mut tape, enc.states, &positions)?;
    let pred = argmax_rows(tape.value(logits));
    let hits = pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
    Ok(Some(hits as f64 / targets.len() as f64))
}
