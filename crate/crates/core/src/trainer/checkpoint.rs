//! Binary checkpoint format.
//!
//! ```text
//! "PBRT"                      magic
//! u32                         format version
//! u32                         header length in bytes
//! [u8; header length]         JSON header
//! u32                         tensor count
//! per tensor:
//!   u32, [u8]                 name length, UTF-8 name
//!   u32, [u32; rank]          rank, dimensions
//!   [f32; product(dims)]      values
//! ```
//!
//! All integers and floats are little-endian. Optimizer moments are stored as
//! `optimizer.m/<name>` and `optimizer.v/<name>`, the best-validation weights
//! of a fine-tuning run as `best/<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{AdamConfig, AdamState, ParamSet, Tensor};
use crate::trainer::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"PBRT";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT1_PREFIX: &str = "optimizer.m/";
const MOMENT2_PREFIX: &str = "optimizer.v/";
const BEST_PREFIX: &str = "best/";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

/// Every random draw in training is derived from `seed` and the counters, so
/// the seed (plus the counters) is the complete generator state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub generator: String,
}

impl RngState {
    pub fn new(seed: u64) -> RngState {
        RngState {
            seed,
            generator: "xoshiro256++/splitmix64-derived".to_string(),
        }
    }
}

/// Validation score of the selected fine-tuning epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestValidation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub epoch: u64,
}

impl BestValidation {
    /// Higher accuracy wins, then higher macro-F1; on a full tie the earlier
    /// epoch (the incumbent) is kept.
    pub fn improves_on(&self, incumbent: &BestValidation) -> bool {
        self.accuracy > incumbent.accuracy
            || (self.accuracy == incumbent.accuracy && self.macro_f1 > incumbent.macro_f1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub counters: Counters,
    pub rng: RngState,
    pub best: Option<BestValidation>,
    /// Weights of the best validation epoch while a fine-tuning run is in progress.
    pub best_params: Option<ParamSet<f32>>,
    pub run: Option<RunConfig>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    counters: Counters,
    rng: RngState,
    optimizer: Option<OptimizerHeader>,
    best: Option<BestValidation>,
    run: Option<RunConfig>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

impl Checkpoint {
    pub fn from_model(model: Model<f32>, seed: u64) -> Checkpoint {
        Checkpoint {
            model,
            optimizer: None,
            counters: Counters::default(),
            rng: RngState::new(seed),
            best: None,
            best_params: None,
            run: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model_config: self.model.config.clone(),
            counters: self.counters,
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            best: self.best,
            run: self.run.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (_, name, t) in self.model.params.iter() {
            tensors.push((name.to_string(), t));
        }
        if let Some(opt) = &self.optimizer {
            for (id, name, _) in self.model.params.iter() {
                tensors.push((format!("{MOMENT1_PREFIX}{name}"), &opt.first_moment[id.index()]));
                tensors.push((format!("{MOMENT2_PREFIX}{name}"), &opt.second_moment[id.index()]));
            }
        }
        if let Some(best) = &self.best_params {
            for (_, name, t) in best.iter() {
                tensors.push((format!("{BEST_PREFIX}{name}"), t));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&u32_len(tensors.len())?.to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(t.shape().len())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&u32_len(d)?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CheckpointCorrupt("missing PBRT magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CheckpointCorrupt(format!("tensor `{name}` is too large")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CheckpointCorrupt("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            named.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        assemble(header, named)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Bitwise equality of all tensors, counters and generator state.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.to_bytes().ok() == other.to_bytes().ok()
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Input(format!("{n} does not fit the checkpoint's 32-bit fields")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointCorrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn assemble(header: Header, named: Vec<(String, Tensor<f32>)>) -> Result<Checkpoint> {
    let config = header.model_config;
    config.validate()?;
    let expected = config.parameter_shapes();
    let mut lookup: std::collections::HashMap<String, Tensor<f32>> = std::collections::HashMap::new();
    for (name, t) in named {
        if lookup.insert(name.clone(), t).is_some() {
            return Err(Error::CheckpointCorrupt(format!("tensor `{name}` appears twice")));
        }
    }
    let mut take_set = |prefix: &str| -> Result<Option<ParamSet<f32>>> {
        let mut set = ParamSet::new();
        let mut found = 0;
        for (name, shape) in &expected {
            let key = format!("{prefix}{name}");
            match lookup.remove(&key) {
                Some(t) if t.shape() == shape.as_slice() => {
                    found += 1;
                    set.insert(name.clone(), t);
                }
                Some(t) => {
                    return Err(Error::CheckpointShape {
                        name: key,
                        found: t.shape().to_vec(),
                        expected: shape.clone(),
                    })
                }
                None => {
                    set.insert(name.clone(), Tensor::zeros(shape));
                }
            }
        }
        match found {
            0 => Ok(None),
            n if n == expected.len() => Ok(Some(set)),
            _ => Err(Error::CheckpointCorrupt(format!("incomplete tensor group `{prefix}`"))),
        }
    };
    let params = take_set("")?.ok_or_else(|| Error::CheckpointCorrupt("no model tensors".into()))?;
    let m1 = take_set(MOMENT1_PREFIX)?;
    let m2 = take_set(MOMENT2_PREFIX)?;
    let best_params = take_set(BEST_PREFIX)?;
    if let Some(extra) = lookup.keys().next() {
        return Err(Error::CheckpointCorrupt(format!("unexpected tensor `{extra}`")));
    }
    let optimizer = match (header.optimizer, m1, m2) {
        (Some(h), Some(m1), Some(m2)) => Some(AdamState {
            config: h.config,
            step: h.step,
            first_moment: m1.iter().map(|(_, _, t)| t.clone()).collect(),
            second_moment: m2.iter().map(|(_, _, t)| t.clone()).collect(),
        }),
        (None, None, None) => None,
        _ => return Err(Error::CheckpointCorrupt("optimizer header and moments disagree".into())),
    };
    Ok(Checkpoint {
        model: Model { config, params },
        optimizer,
        counters: header.counters,
        rng: header.rng,
        best: header.best,
        best_params,
        run: header.run,
    })
}
