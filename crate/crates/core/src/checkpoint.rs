//! On-disk checkpoints: `manifest.json` + `params.bin` + `vocab.txt`.
//!
//! `params.bin` holds little-endian `f32` values of every tensor in manifest
//! order: model parameters first, then the Adam moments when present.

use std::fs;
use std::path::Path;

use cpdae_tensor::Tensor;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::losses::LossBreakdown;
use crate::model::{init_params, Model, ModelConfig, ParamSet};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::text::Vocab;
use crate::{Error, Result};

pub const FORMAT_VERSION: &str = "cpdae-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Init,
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    /// Echo of the training configuration that produced the checkpoint.
    pub train: serde_json::Value,
    pub step: u64,
    pub adam_t: Option<u64>,
    pub total_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    pub loss_history: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: Model,
    pub vocab: Vocab,
    pub optimizer: Option<AdamState>,
    pub train_config: serde_json::Value,
    pub step: u64,
    pub loss_history: Vec<LossBreakdown>,
}

impl Checkpoint {
    /// A freshly initialized model with no training history.
    pub fn init(config: ModelConfig, vocab: Vocab, rng: &mut Rng) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::contract(format!(
                "model vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Checkpoint {
            kind: CheckpointKind::Init,
            model: Model::init(config, rng)?,
            vocab,
            optimizer: None,
            train_config: serde_json::Value::Null,
            step: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn manifest(&self) -> Manifest {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let mut push = |group, params: &ParamSet<f32>| {
            for (name, t) in params.iter() {
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    group,
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                });
                offset += 4 * t.numel() as u64;
            }
        };
        push(TensorGroup::Param, &self.model.params);
        if let Some(opt) = &self.optimizer {
            push(TensorGroup::AdamM, &opt.m);
            push(TensorGroup::AdamV, &opt.v);
        }
        Manifest {
            format_version: FORMAT_VERSION.into(),
            kind: self.kind,
            model: self.model.config.clone(),
            train: self.train_config.clone(),
            step: self.step,
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            total_bytes: offset,
            tensors,
            loss_history: self.loss_history.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        let mut blob = Vec::with_capacity(manifest.total_bytes as usize);
        let mut groups = vec![&self.model.params];
        if let Some(opt) = &self.optimizer {
            groups.push(&opt.m);
            groups.push(&opt.v);
        }
        for set in groups {
            for (_, t) in set.iter() {
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let write = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        write(PARAMS_FILE, &blob)?;
        write(MANIFEST_FILE, json.as_bytes())?;
        self.vocab.save(&dir.join(VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let path = dir.join(PARAMS_FILE);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if blob.len() as u64 != manifest.total_bytes {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes but the manifest expects {} (truncated or foreign file)",
                path.display(),
                blob.len(),
                manifest.total_bytes
            )));
        }
        manifest.model.validate()?;

        let mut params = ParamSet::default();
        let mut m = ParamSet::default();
        let mut v = ParamSet::default();
        let mut expected_offset = 0u64;
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor `{}` has unsupported dtype {}", entry.name, entry.dtype)));
            }
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` starts at byte {} but {} was expected",
                    entry.name, entry.offset, expected_offset
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * numel;
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{}` runs past the end of {PARAMS_FILE}", entry.name))
            })?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)?;
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor `{}` contains non-finite values", entry.name)));
            }
            let target = match entry.group {
                TensorGroup::Param => &mut params,
                TensorGroup::AdamM => &mut m,
                TensorGroup::AdamV => &mut v,
            };
            if target.get(&entry.name).is_some() {
                return Err(Error::Checkpoint(format!("tensor `{}` listed twice", entry.name)));
            }
            target.insert(entry.name.clone(), t);
            expected_offset = end as u64;
        }
        check_layout(&manifest.model, &params)?;

        let optimizer = match manifest.adam_t {
            Some(t) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::Checkpoint("optimizer moments do not cover every parameter".into()));
                }
                Some(AdamState { t, m, v })
            }
            None => None,
        };
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != manifest.model.vocab_size {
            return Err(Error::Checkpoint(format!(
                "{VOCAB_FILE} has {} tokens but the model expects {}",
                vocab.len(),
                manifest.model.vocab_size
            )));
        }
        Ok(Checkpoint {
            kind: manifest.kind,
            model: Model {
                config: manifest.model,
                params,
            },
            vocab,
            optimizer,
            train_config: manifest.train,
            step: manifest.step,
            loss_history: manifest.loss_history,
        })
    }
}

/// Reads and version-checks `manifest.json` without touching the blob.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let found = raw.get("format_version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found: found.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Every stored parameter must belong to the architecture with the right
/// shape, and every encoder parameter must be present.
fn check_layout(cfg: &ModelConfig, params: &ParamSet<f32>) -> Result<()> {
    let reference = init_params(cfg, &mut Rng::seed_from_u64(0))?;
    for (name, t) in params.iter() {
        let want = reference
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        if want.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, the model config implies {:?}",
                t.shape(),
                want.shape()
            )));
        }
    }
    let encoder = Model {
        config: cfg.clone(),
        params: reference,
    }
    .into_encoder();
    if let Some(missing) = encoder.params.names().find(|n| params.get(n).is_none()) {
        return Err(Error::Checkpoint(format!("encoder tensor `{missing}` is missing")));
    }
    Ok(())
}
