//! Binary checkpoint: magic, version, JSON header, little-endian f64 payload.
//!
//! ```text
//! bytes 0..8    b"SMBCKPT\0"
//! bytes 8..12   u32 LE format version
//! bytes 12..20  u64 LE header length
//! header        UTF-8 JSON (spec, metadata, tensor table, optimizer config)
//! payload       f64 LE values; tensor offsets and lengths count values
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{BnBuffer, Model};
use super::spec::ModelSpec;
use super::ModelError;
use crate::autodiff::RunningStats;
use crate::optim::{AdamConfig, AdamState, Parameter};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMBCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Section {
    Param,
    BnMean,
    BnVar,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    section: Section,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    meta: CheckpointMeta,
    dtype: String,
    tensors: Vec<TensorEntry>,
    bn_initialized: Vec<(String, bool)>,
    optimizer: Option<OptimizerHeader>,
}

const DTYPE: &str = "f64-le";

struct PayloadWriter {
    entries: Vec<TensorEntry>,
    values: Vec<f64>,
}

impl PayloadWriter {
    fn push(&mut self, name: &str, section: Section, shape: &[usize], data: &[f64]) {
        self.entries.push(TensorEntry {
            name: name.to_string(),
            section,
            shape: shape.to_vec(),
            offset: self.values.len(),
            len: data.len(),
        });
        self.values.extend_from_slice(data);
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optimizer: Option<&AdamState>,
    meta: CheckpointMeta,
) -> Result<(), ModelError> {
    let mut w = PayloadWriter {
        entries: Vec::new(),
        values: Vec::new(),
    };
    for p in model.params() {
        w.push(&p.name, Section::Param, p.value.shape(), p.value.data());
    }
    for b in model.buffers() {
        let c = [b.stats.channels()];
        w.push(&b.name, Section::BnMean, &c, &b.stats.mean);
        w.push(&b.name, Section::BnVar, &c, &b.stats.var);
    }
    if let Some(opt) = optimizer {
        for (p, (m, v)) in model.params().iter().zip(opt.first_moment.iter().zip(&opt.second_moment)) {
            w.push(&p.name, Section::AdamM, m.shape(), m.data());
            w.push(&p.name, Section::AdamV, v.shape(), v.data());
        }
    }
    let header = Header {
        spec: model.spec().clone(),
        meta,
        dtype: DTYPE.to_string(),
        tensors: w.entries,
        bn_initialized: model
            .buffers()
            .iter()
            .map(|b| (b.name.clone(), b.stats.initialized))
            .collect(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config,
            step: o.step,
        }),
    };
    let header = serde_json::to_vec(&header).map_err(|e| ModelError::Header(e.to_string()))?;

    let mut bytes = Vec::with_capacity(20 + header.len() + 8 * w.values.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in &w.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
    bytes
        .get(at..at + n)
        .ok_or_else(|| ModelError::Truncated(format!("{what} needs {n} bytes at offset {at}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&bytes, 8, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(take(&bytes, 12, 8, "header length")?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&bytes, 20, header_len, "header")?)
        .map_err(|e| ModelError::Header(e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(ModelError::Header(format!("unsupported dtype {}", header.dtype)));
    }
    let payload = &bytes[20 + header_len..];
    if payload.len() % 8 != 0 {
        return Err(ModelError::Truncated("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut table: HashMap<(Section, &str), &TensorEntry> = HashMap::new();
    for e in &header.tensors {
        table.insert((e.section, e.name.as_str()), e);
    }
    let fetch = |section: Section, name: &str, shape: &[usize]| -> Result<Tensor, ModelError> {
        let e = table
            .get(&(section, name))
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
        if e.shape != shape {
            return Err(ModelError::Header(format!(
                "tensor `{name}` has shape {:?}, model expects {shape:?}",
                e.shape
            )));
        }
        let data = values
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| ModelError::Truncated(format!("tensor `{name}` runs past the payload")))?;
        Ok(Tensor::new(shape.to_vec(), data.to_vec())?)
    };

    let template = Model::new(header.spec.clone(), 0)?;
    let params = template
        .params()
        .iter()
        .map(|p| Ok(Parameter::new(p.name.clone(), fetch(Section::Param, &p.name, p.value.shape())?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let initialized: HashMap<&str, bool> = header
        .bn_initialized
        .iter()
        .map(|(n, i)| (n.as_str(), *i))
        .collect();
    let buffers = template
        .buffers()
        .iter()
        .map(|b| {
            let c = [b.stats.channels()];
            Ok(BnBuffer {
                name: b.name.clone(),
                stats: RunningStats {
                    mean: fetch(Section::BnMean, &b.name, &c)?.into_data(),
                    var: fetch(Section::BnVar, &b.name, &c)?.into_data(),
                    initialized: *initialized
                        .get(b.name.as_str())
                        .ok_or_else(|| ModelError::MissingTensor(b.name.clone()))?,
                },
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let optimizer = match &header.optimizer {
        None => None,
        Some(o) => {
            let mut first = Vec::with_capacity(params.len());
            let mut second = Vec::with_capacity(params.len());
            for p in &params {
                first.push(fetch(Section::AdamM, &p.name, p.value.shape())?);
                second.push(fetch(Section::AdamV, &p.name, p.value.shape())?);
            }
            Some(AdamState {
                config: o.config,
                step: o.step,
                first_moment: first,
                second_moment: second,
            })
        }
    };
    Ok(Checkpoint {
        model: Model::from_parts(header.spec, params, buffers),
        optimizer,
        meta: header.meta,
    })
}
