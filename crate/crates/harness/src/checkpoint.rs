//! Binary checkpoints of a frozen model and its tuning parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "APEXCKPT"
//! version    u32
//! meta_len   u64      followed by meta_len bytes of JSON metadata
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   rank     u32, rank × u64 dims
//!   len      u64, len × f64 values
//! ```
//!
//! Model tensors are named `model.<name>`, tuning tensors `tuning.<name>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use apex_core::encoders::{DualEncoderModel, EncoderConfig};
use apex_core::tuning::{Adapter, AdapterConfig, PromptConfig, TextPrompts, TuningParams, VisualPrompts};
use apex_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::ExperimentConfig;
use crate::report::write_atomic;

pub const MAGIC: &[u8; 8] = b"APEXCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    /// Seconds since the Unix epoch at first save; kept across re-saves.
    pub created_unix: u64,
    pub seed: u64,
    pub frozen: bool,
    pub experiment: ExperimentConfig,
    pub text_adapter: AdapterConfig,
    pub image_adapter: Option<AdapterConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: CheckpointMetadata,
    pub model: DualEncoderModel,
    pub tuning: TuningParams,
}

impl Checkpoint {
    /// Stamps the current time.
    pub fn new(experiment: ExperimentConfig, seed: u64, model: DualEncoderModel, tuning: TuningParams) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let adapter_config = |a: &Adapter| AdapterConfig {
            mode: a.mode(),
            rank: a.rank(),
        };
        Self {
            metadata: CheckpointMetadata {
                created_unix,
                seed,
                frozen: model.is_frozen(),
                text_adapter: adapter_config(&tuning.text_adapter),
                image_adapter: tuning.image_adapter.as_ref().map(adapter_config),
                experiment,
            },
            model,
            tuning,
        }
    }

    fn encoder(&self) -> &EncoderConfig {
        self.model.config()
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if ckpt.encoder() != &ckpt.metadata.experiment.encoder {
        return Err(HarnessError::Config("model and metadata encoder configs differ".into()));
    }
    let meta = serde_json::to_vec(&ckpt.metadata).map_err(|e| HarnessError::Serialize(e.to_string()))?;
    let mut tensors: Vec<(String, &Tensor)> = ckpt
        .model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("model.{n}"), t))
        .collect();
    tensors.extend(
        ckpt.tuning
            .trainable_params()
            .into_iter()
            .map(|(n, t)| (format!("tuning.{n}"), t)),
    );

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> HarnessError {
        HarnessError::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.fail(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > remaining) {
            return Err(HarnessError::Format {
                offset: at as u64,
                message: format!("{what} {n} exceeds the remaining {remaining} bytes"),
            });
        }
        Ok(n as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(HarnessError::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(HarnessError::Format {
            offset: version_at as u64,
            message: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let meta_len = r.len("metadata length", 1)?;
    let meta_at = r.pos;
    let metadata: CheckpointMetadata = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| {
        HarnessError::Format {
            offset: meta_at as u64,
            message: format!("metadata: {e}"),
        }
    })?;
    let count = r.u32("tensor count")?;
    let mut model_tensors = HashMap::new();
    let mut tuning_tensors = HashMap::new();
    for _ in 0..count {
        let name_at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| HarnessError::Format {
                offset: name_at as u64,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > apex_core::tensor::MAX_RANK {
            return Err(r.fail(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let len_at = r.pos;
        let len = r.len("value count", 8)?;
        if shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)) != Some(len) {
            return Err(HarnessError::Format {
                offset: len_at as u64,
                message: format!("tensor {name}: {len} values for shape {shape:?}"),
            });
        }
        let data = r
            .take(8 * len, "values")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| HarnessError::Format {
            offset: len_at as u64,
            message: e.to_string(),
        })?;
        let duplicate = if let Some(n) = name.strip_prefix("model.") {
            model_tensors.insert(n.to_string(), tensor).is_some()
        } else if let Some(n) = name.strip_prefix("tuning.") {
            tuning_tensors.insert(n.to_string(), tensor).is_some()
        } else {
            return Err(HarnessError::Format {
                offset: name_at as u64,
                message: format!("unknown tensor namespace in {name}"),
            });
        };
        if duplicate {
            return Err(HarnessError::Format {
                offset: name_at as u64,
                message: format!("duplicate tensor {name}"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes"));
    }
    let end = bytes.len() as u64;
    let semantic = |e: HarnessError| HarnessError::Format {
        offset: end,
        message: e.to_string(),
    };
    let encoder = metadata.experiment.encoder.clone();
    let model = DualEncoderModel::from_named_tensors(encoder.clone(), &model_tensors, metadata.frozen)
        .map_err(|e| semantic(e.into()))?;
    let tuning = rebuild_tuning(&metadata, &encoder, tuning_tensors).map_err(semantic)?;
    Ok(Checkpoint {
        metadata,
        model,
        tuning,
    })
}

fn rebuild_tuning(
    metadata: &CheckpointMetadata,
    encoder: &EncoderConfig,
    mut tensors: HashMap<String, Tensor>,
) -> Result<TuningParams> {
    let mut take_blocks = |prefix: &str| {
        let mut blocks = Vec::new();
        while let Some(t) = tensors.remove(&format!("{prefix}.{}", blocks.len())) {
            blocks.push(t);
        }
        blocks
    };
    let visual = take_blocks("visual_prompt");
    let mut text = take_blocks("text_prompt");
    let mut adapter = |prefix: &str, cfg: &AdapterConfig| -> Result<Adapter> {
        let mut named = HashMap::new();
        for key in ["a", "b", "u", "v", "w1", "w2"] {
            if let Some(t) = tensors.remove(&format!("{prefix}.{key}")) {
                named.insert(key, t);
            }
        }
        Ok(Adapter::from_named(cfg.mode, &named)?)
    };
    let text_adapter = adapter("text_adapter", &metadata.text_adapter)?;
    let image_adapter = metadata
        .image_adapter
        .as_ref()
        .map(|cfg| adapter("image_adapter", cfg))
        .transpose()?;
    if let Some(name) = tensors.keys().next() {
        return Err(HarnessError::Config(format!("unexpected tuning tensor {name}")));
    }
    let prompt_config = PromptConfig {
        visual_depth: visual.len(),
        text_depth: text.len(),
        visual_len: visual.first().map_or(metadata.experiment.prompts.visual_len, |t| t.rows()),
        text_len: text.first().map_or(metadata.experiment.prompts.text_len, |t| t.rows()),
    };
    prompt_config.validate(encoder)?;
    let shallow = (!text.is_empty()).then(|| text.remove(0));
    Ok(TuningParams {
        prompt_config,
        visual: VisualPrompts { blocks: visual },
        text: TextPrompts { shallow, deep: text },
        text_adapter,
        image_adapter,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes)
}
