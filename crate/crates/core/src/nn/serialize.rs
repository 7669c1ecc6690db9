//! `.fpt.json` model files.
//!
//! A JSON envelope carries the architecture, a manifest of every tensor
//! (parameters in build order, then batch-norm running statistics), the
//! CRC-32 of the raw payload and the payload itself: little-endian f64
//! values, base64-encoded.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::arch::ArchSpec;
use crate::nn::build::build_student;
use crate::nn::model::ModelGraph;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_EXTENSION: &str = "fpt.json";
const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the decoded payload.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub format_version: u32,
    pub spec: ArchSpec,
    pub frozen: bool,
    pub param_count: usize,
    pub param_manifest: Vec<ManifestEntry>,
    pub checksum: u32,
    pub payload: String,
}

/// Every stored tensor in payload order.
fn tensors(model: &ModelGraph) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model.params.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect();
    for (name, s) in model.params.stats_iter() {
        let c = s.mean.len();
        out.push((format!("{name}.running_mean"), Tensor::new(vec![c], s.mean.clone()).unwrap()));
        out.push((format!("{name}.running_var"), Tensor::new(vec![c], s.var.clone()).unwrap()));
    }
    out
}

pub fn to_envelope(model: &ModelGraph) -> Envelope {
    let mut payload = Vec::new();
    let mut manifest = Vec::new();
    for (name, t) in tensors(model) {
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset,
            length: payload.len() - offset,
        });
    }
    Envelope {
        format_version: FORMAT_VERSION,
        spec: model.spec.clone(),
        frozen: model.params.iter().all(|(_, p)| !p.trainable),
        param_count: model.count_params(),
        param_manifest: manifest,
        checksum: crc32fast::hash(&payload),
        payload: B64.encode(&payload),
    }
}

pub fn serialize(model: &ModelGraph) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(&to_envelope(model)).expect("envelope is serializable");
    bytes.push(b'\n');
    bytes
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelGraph> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| match e.classify() {
        serde_json::error::Category::Eof => Error::TruncatedFile { found: bytes.len() },
        _ => Error::MalformedModel(e.to_string()),
    })?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::MalformedModel("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let env: Envelope = serde_json::from_value(value).map_err(|e| Error::MalformedModel(e.to_string()))?;
    from_envelope(&env)
}

pub fn from_envelope(env: &Envelope) -> Result<ModelGraph> {
    let payload = B64
        .decode(&env.payload)
        .map_err(|e| Error::MalformedModel(format!("payload is not base64: {e}")))?;
    let expected = env.param_manifest.iter().map(|m| m.offset + m.length).max().unwrap_or(0);
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let crc = crc32fast::hash(&payload);
    if crc != env.checksum {
        return Err(Error::ChecksumMismatch {
            expected: env.checksum,
            found: crc,
        });
    }
    let mut model = build_student(&env.spec, 0)?;
    let wanted = tensors(&model);
    if wanted.len() != env.param_manifest.len() {
        return Err(Error::MalformedModel(format!(
            "manifest lists {} tensors, architecture has {}",
            env.param_manifest.len(),
            wanted.len()
        )));
    }
    for ((name, t), m) in wanted.iter().zip(&env.param_manifest) {
        if *name != m.name || t.shape() != m.shape.as_slice() || m.dtype != DTYPE || m.length != t.numel() * 8 {
            return Err(Error::MalformedModel(format!("manifest entry `{}` does not match `{name}`", m.name)));
        }
        let values: Vec<f64> = payload[m.offset..m.offset + m.length]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(bn) = name.strip_suffix(".running_mean") {
            model.params.stats_mut(bn)?.mean = values;
        } else if let Some(bn) = name.strip_suffix(".running_var") {
            model.params.stats_mut(bn)?.var = values;
        } else {
            *model.params.get_mut(name)? = Tensor::new(m.shape.clone(), values)?;
        }
    }
    if env.frozen {
        model.params.freeze();
    }
    if model.count_params() != env.param_count {
        return Err(Error::MalformedModel(format!(
            "envelope reports {} parameters, payload holds {}",
            env.param_count,
            model.count_params()
        )));
    }
    Ok(model)
}

pub fn save(model: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, serialize(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelGraph> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize(&bytes)
}
