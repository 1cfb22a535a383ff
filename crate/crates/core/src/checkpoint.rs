//! Deterministic model serialization.
//!
//! A checkpoint file is a text header followed by a binary blob:
//!
//! ```text
//! COSOOD-CKPT v1
//! head cosine
//! meta {...json: model config, train config, seed, final epoch...}
//! param head.weight 4x16
//! buffer head.scale.bn.running_mean 1
//! end
//! <little-endian f64 values in manifest order>
//! ```
//!
//! Values are written bit-exactly, so save -> load -> save produces
//! byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::model::{BnBuffer, Model, ModelConfig};
use crate::tensor::NdArray;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &str = "COSOOD-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub final_epoch: usize,
}

/// A model's complete state: parameters, batch-norm running statistics, and
/// training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub head_kind: HeadKind,
    pub meta: CheckpointMeta,
    pub params: Vec<(String, NdArray)>,
    pub buffers: Vec<(String, NdArray)>,
}

impl Checkpoint {
    /// Snapshot a model.
    pub fn of(model: &Model, train: TrainConfig, seed: u64, final_epoch: usize) -> Self {
        let params = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let mut buffers = Vec::new();
        for (key, buf) in model.bn_buffers() {
            buffers.push((
                format!("{key}.running_mean"),
                NdArray::from_vec(buf.running_mean.clone()),
            ));
            buffers.push((
                format!("{key}.running_var"),
                NdArray::from_vec(buf.running_var.clone()),
            ));
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            head_kind: model.head_kind(),
            meta: CheckpointMeta {
                model: model.config().clone(),
                train,
                seed,
                final_epoch,
            },
            params,
            buffers,
        }
    }

    /// Rebuild the model this checkpoint was taken from.
    pub fn build_model(&self) -> Result<Model> {
        if self.head_kind != self.meta.model.head.kind {
            return Err(Error::CorruptCheckpoint(
                "head kind disagrees with model config".into(),
            ));
        }
        let mut model = Model::new(self.meta.model.clone(), 0)?;
        if self.params.len() != model.params().len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} parameters, file has {}",
                model.params().len(),
                self.params.len()
            )));
        }
        for (name, value) in &self.params {
            let param = model.params_mut().get_mut(name).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("unknown parameter {name}"))
            })?;
            if param.value.shape() != value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {name}: shape {:?} does not match expected {:?}",
                    value.shape(),
                    param.value.shape()
                )));
            }
            param.value = value.clone();
        }
        let expected_buffers: Vec<String> = model
            .bn_buffers()
            .iter()
            .flat_map(|(k, _)| [format!("{k}.running_mean"), format!("{k}.running_var")])
            .collect();
        let found: Vec<String> = self.buffers.iter().map(|(n, _)| n.clone()).collect();
        if expected_buffers != found {
            return Err(Error::CorruptCheckpoint(format!(
                "buffer manifest {found:?} does not match expected {expected_buffers:?}"
            )));
        }
        for (name, value) in &self.buffers {
            let (key, field) = name
                .rsplit_once('.')
                .ok_or_else(|| Error::CorruptCheckpoint(format!("bad buffer name {name}")))?;
            let buffer: &mut BnBuffer = &mut model
                .bn_buffers_mut()
                .iter_mut()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown buffer {name}")))?
                .1;
            let target = match field {
                "running_mean" => &mut buffer.running_mean,
                "running_var" => &mut buffer.running_var,
                _ => return Err(Error::CorruptCheckpoint(format!("bad buffer name {name}"))),
            };
            if target.len() != value.len() {
                return Err(Error::CorruptCheckpoint(format!(
                    "buffer {name}: length {} does not match expected {}",
                    value.len(),
                    target.len()
                )));
            }
            *target = value.data().to_vec();
        }
        Ok(model)
    }
}

fn render_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::CorruptCheckpoint(format!("bad shape field `{s}`")))
        })
        .collect()
}

/// Serialize a checkpoint to `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(&format!("{} v{}\n", CHECKPOINT_MAGIC, ckpt.version));
    header.push_str(&format!("head {}\n", ckpt.head_kind.as_str()));
    let meta = serde_json::to_string(&ckpt.meta)
        .map_err(|e| Error::CorruptCheckpoint(format!("meta serialization failed: {e}")))?;
    header.push_str(&format!("meta {meta}\n"));
    for (name, value) in &ckpt.params {
        header.push_str(&format!("param {name} {}\n", render_shape(value.shape())));
    }
    for (name, value) in &ckpt.buffers {
        header.push_str(&format!("buffer {name} {}\n", render_shape(value.shape())));
    }
    header.push_str("end\n");

    let mut bytes = header.into_bytes();
    for (_, value) in ckpt.params.iter().chain(&ckpt.buffers) {
        for &v in value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a checkpoint from `path`, validating magic, version, and manifest
/// against the payload length.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;

    let mut pos = 0usize;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CorruptCheckpoint("unterminated header".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::CorruptCheckpoint("header is not UTF-8".into()))?;
        pos += nl + 1;
        Ok(line)
    };

    let first = next_line()?;
    let Some(version_str) = first.strip_prefix(&format!("{CHECKPOINT_MAGIC} v")) else {
        return Err(Error::CorruptCheckpoint(format!(
            "missing {CHECKPOINT_MAGIC} header"
        )));
    };
    let version: u32 = version_str
        .parse()
        .map_err(|_| Error::CorruptCheckpoint(format!("bad version `{version_str}`")))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }

    let head_line = next_line()?;
    let head_kind = head_line
        .strip_prefix("head ")
        .and_then(HeadKind::parse)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("bad head line `{head_line}`")))?;

    let meta_line = next_line()?;
    let meta: CheckpointMeta = meta_line
        .strip_prefix("meta ")
        .ok_or_else(|| Error::CorruptCheckpoint("missing meta line".into()))
        .and_then(|json| {
            serde_json::from_str(json)
                .map_err(|e| Error::CorruptCheckpoint(format!("bad meta json: {e}")))
        })?;

    let mut manifest: Vec<(bool, String, Vec<usize>)> = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        let mut fields = line.splitn(3, ' ');
        let kind = fields.next().unwrap_or_default();
        let (Some(name), Some(shape)) = (fields.next(), fields.next()) else {
            return Err(Error::CorruptCheckpoint(format!("bad manifest line `{line}`")));
        };
        let is_param = match kind {
            "param" => true,
            "buffer" => false,
            _ => {
                return Err(Error::CorruptCheckpoint(format!(
                    "unknown manifest entry `{line}`"
                )))
            }
        };
        manifest.push((is_param, name.to_string(), parse_shape(shape)?));
    }

    let total: usize = manifest
        .iter()
        .map(|(_, _, shape)| shape.iter().product::<usize>())
        .sum();
    let blob = &bytes[pos..];
    if blob.len() != total * 8 {
        return Err(Error::CorruptCheckpoint(format!(
            "payload holds {} bytes, manifest expects {}",
            blob.len(),
            total * 8
        )));
    }

    let mut offset = 0usize;
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for (is_param, name, shape) in manifest {
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let start = offset + i * 8;
            data.push(f64::from_le_bytes(blob[start..start + 8].try_into().unwrap()));
        }
        offset += count * 8;
        let array = NdArray::new(shape, data)?;
        if is_param {
            params.push((name, array));
        } else {
            buffers.push((name, array));
        }
    }

    Ok(Checkpoint {
        version,
        head_kind,
        meta,
        params,
        buffers,
    })
}
