//! Binary checkpoints.
//!
//! Layout: `b"HSIBCKP1"`, manifest length (u32 LE), JSON manifest, f32 LE
//! tensors concatenated in manifest order, CRC32 (u32 LE) of all preceding
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{ModelError, Result};
use crate::graph::ModelGraph;

const MAGIC: &[u8; 8] = b"HSIBCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element type; absent means `f32`. Quantized checkpoints use `"i8"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_point: Option<i64>,
}

impl TensorEntry {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
            dtype: None,
            scale: None,
            zero_point: None,
        }
    }

    pub fn is_f32(&self) -> bool {
        self.dtype.as_deref().is_none_or(|d| d == "f32")
    }

    /// Stored size in bytes.
    pub fn byte_len(&self) -> usize {
        let n: usize = self.shape.iter().product();
        if self.is_f32() {
            4 * n
        } else {
            n
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: ArchSpec,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Digest of the configuration that produced the weights.
    #[serde(default)]
    pub config_digest: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form section for extensions such as quantization parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

/// Everything stored, in payload order: parameters then BN running stats.
fn tensors(model: &ModelGraph<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out: Vec<_> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (i, bn) in model.convs().filter_map(|c| c.bn.as_ref()).enumerate() {
        let c = bn.channels();
        out.push((format!("bn{}.running_mean", i + 1), vec![c], bn.running_mean.clone()));
        out.push((format!("bn{}.running_var", i + 1), vec![c], bn.running_var.clone()));
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub class_names: Vec<String>,
    pub config_digest: String,
    pub metrics: BTreeMap<String, f64>,
}

pub fn to_bytes(model: &ModelGraph<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let ts = tensors(model);
    let manifest = Manifest {
        arch: model.spec.clone(),
        class_names: meta.class_names.clone(),
        config_digest: meta.config_digest.clone(),
        metrics: meta.metrics.clone(),
        tensors: ts
            .iter()
            .map(|(n, s, _)| TensorEntry::f32(n.clone(), s.clone()))
            .collect(),
        extra: None,
    };
    let mut payload = Vec::with_capacity(ts.iter().map(|t| 4 * t.2.len()).sum::<usize>());
    for (_, _, d) in &ts {
        for v in d {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_frame(&manifest, &payload)
}

/// Frames a manifest and its raw payload: magic, length, JSON, payload, CRC32.
pub fn write_frame(manifest: &Manifest, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Inverse of [`write_frame`]. Checks the magic, the payload size implied
/// by the manifest, and the CRC.
pub fn read_frame(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ModelError::Corrupt("missing checkpoint magic".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if 12 + mlen > body.len() {
        return Err(ModelError::Corrupt(format!(
            "manifest length {mlen} exceeds file size {}",
            bytes.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&body[12..12 + mlen])
        .map_err(|e| ModelError::Corrupt(format!("manifest: {e}")))?;
    let payload = &body[12 + mlen..];
    let want: usize = manifest.tensors.iter().map(TensorEntry::byte_len).sum();
    if payload.len() != want {
        return Err(ModelError::Corrupt(format!(
            "payload is {} bytes, manifest describes {want}",
            payload.len()
        )));
    }
    let crc = crc32fast::hash(body);
    if crc != stored {
        return Err(ModelError::Corrupt(format!("crc32 {crc:08x} != stored {stored:08x}")));
    }
    Ok((manifest, payload))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelGraph<f32>, Manifest)> {
    let (manifest, payload) = read_frame(bytes)?;
    if let Some(t) = manifest.tensors.iter().find(|t| !t.is_f32()) {
        return Err(ModelError::Corrupt(format!(
            "tensor {} is stored as {}; this is a quantized checkpoint",
            t.name,
            t.dtype.as_deref().unwrap_or("?")
        )));
    }

    let mut rng = hsib_tensor::RngState::new(0);
    let mut model = ModelGraph::<f32>::build(&manifest.arch, &mut rng)?;
    let mut values: BTreeMap<&str, (&[usize], Vec<f32>)> = BTreeMap::new();
    let mut off = 0;
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        off += 4 * n;
        values.insert(&t.name, (&t.shape, data));
    }
    let expected = tensors(&model);
    if expected.len() != values.len() {
        return Err(ModelError::Corrupt(format!(
            "{} tensors stored, architecture has {}",
            values.len(),
            expected.len()
        )));
    }
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let (shape, data) = values
            .remove(name.as_str())
            .ok_or_else(|| ModelError::Corrupt(format!("tensor {name} missing")))?;
        if shape != p.shape() {
            return Err(ModelError::Mismatch {
                what: "tensor shape",
                found: format!("{name} {shape:?}"),
                expected: format!("{:?}", p.shape()),
            });
        }
        p.data_mut().copy_from_slice(&data);
    }
    for (i, bn) in model.convs_mut().filter_map(|c| c.bn.as_mut()).enumerate() {
        for (suffix, dst) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
            let key = format!("bn{}.{suffix}", i + 1);
            let (_, data) = values
                .remove(key.as_str())
                .ok_or_else(|| ModelError::Corrupt(format!("tensor {key} missing")))?;
            if data.len() != dst.len() {
                return Err(ModelError::Corrupt(format!("{key} has {} entries", data.len())));
            }
            *dst = data;
        }
    }
    model.set_training(false);
    Ok((model, manifest))
}

pub fn save_checkpoint(model: &ModelGraph<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph<f32>, Manifest)> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

/// Loads and checks the class count against what the caller will feed it.
pub fn load_checkpoint_for(path: &Path, classes: usize) -> Result<(ModelGraph<f32>, Manifest)> {
    let (m, man) = load_checkpoint(path)?;
    if man.arch.classes != classes {
        return Err(ModelError::Mismatch {
            what: "class count",
            found: man.arch.classes.to_string(),
            expected: classes.to_string(),
        });
    }
    Ok((m, man))
}
