//! Quantized checkpoints.
//!
//! Same framing as f32 checkpoints. Int8 weight entries carry
//! `"dtype": "i8"` with their scale and zero point and are stored as raw
//! bytes; biases and any f32 conv layers are stored as f32. Layer structure
//! and activation ranges live in the manifest's `extra.quant` section.

use std::path::Path;

use hsib_models::{read_frame, write_frame, BatchNorm, CheckpointMeta, Conv, Manifest, ModelError, TensorEntry};
use hsib_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::model::{QLayer, QLayerKind, QWeight, QuantMode, QuantizedModel};
use crate::qparams::QParams;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerMeta {
    name: String,
    kind: QLayerKind,
    relu: bool,
    pool: bool,
    weight: QParams,
    output: Option<QParams>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FloatConvMeta {
    name: String,
    pool: bool,
    /// `(eps, momentum)` when the layer has batch norm.
    bn: Option<(f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantSection {
    mode: QuantMode,
    input: Option<QParams>,
    float_convs: Vec<FloatConvMeta>,
    layers: Vec<LayerMeta>,
}

enum Payload<'a> {
    F32(&'a [f32]),
    I8(&'a [i8]),
}

fn push_f32<'a>(entries: &mut Vec<TensorEntry>, name: String, shape: Vec<usize>, v: &'a [f32]) -> &'a [f32] {
    entries.push(TensorEntry::f32(name, shape));
    v
}

pub fn to_bytes(qm: &QuantizedModel, meta: &CheckpointMeta) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut data: Vec<Payload> = Vec::new();
    let mut float_convs = Vec::new();
    for (i, c) in qm.float_convs.iter().enumerate() {
        data.push(Payload::F32(push_f32(&mut entries, format!("{}.weight", c.name), c.weight.shape().to_vec(), c.weight.data())));
        data.push(Payload::F32(push_f32(&mut entries, format!("{}.bias", c.name), c.bias.shape().to_vec(), c.bias.data())));
        if let Some(bn) = &c.bn {
            let ch = bn.channels();
            for (suffix, v) in [
                ("gamma", bn.gamma.data()),
                ("beta", bn.beta.data()),
                ("running_mean", &bn.running_mean[..]),
                ("running_var", &bn.running_var[..]),
            ] {
                data.push(Payload::F32(push_f32(&mut entries, format!("bn{}.{suffix}", i + 1), vec![ch], v)));
            }
        }
        float_convs.push(FloatConvMeta {
            name: c.name.clone(),
            pool: c.pool,
            bn: c.bn.as_ref().map(|b| (b.eps, b.momentum)),
        });
    }
    let mut layers = Vec::new();
    for l in &qm.layers {
        entries.push(TensorEntry {
            name: format!("{}.weight", l.name),
            shape: l.weight.shape.clone(),
            dtype: Some("i8".into()),
            scale: Some(l.weight.qp.scale),
            zero_point: Some(l.weight.qp.zero_point),
        });
        data.push(Payload::I8(&l.weight.data));
        data.push(Payload::F32(push_f32(&mut entries, format!("{}.bias", l.name), vec![l.bias.len()], &l.bias)));
        layers.push(LayerMeta {
            name: l.name.clone(),
            kind: l.kind,
            relu: l.relu,
            pool: l.pool,
            weight: l.weight.qp,
            output: l.output,
        });
    }
    let section = QuantSection {
        mode: qm.mode,
        input: qm.input,
        float_convs,
        layers,
    };
    let manifest = Manifest {
        arch: qm.spec.clone(),
        class_names: meta.class_names.clone(),
        config_digest: meta.config_digest.clone(),
        metrics: meta.metrics.clone(),
        tensors: entries,
        extra: Some(serde_json::json!({ "quant": section })),
    };
    let mut payload = Vec::new();
    for d in data {
        match d {
            Payload::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            Payload::I8(v) => payload.extend(v.iter().map(|&x| x as u8)),
        }
    }
    write_frame(&manifest, &payload)
}

struct Reader<'a> {
    entries: std::slice::Iter<'a, TensorEntry>,
    payload: &'a [u8],
}

impl<'a> Reader<'a> {
    fn next(&mut self, name: &str) -> Result<&'a TensorEntry> {
        let e = self
            .entries
            .next()
            .ok_or_else(|| QuantError::Checkpoint(format!("tensor {name} missing")))?;
        if e.name != name {
            return Err(QuantError::Checkpoint(format!("expected tensor {name}, found {}", e.name)));
        }
        Ok(e)
    }

    fn take(&mut self, e: &TensorEntry) -> &'a [u8] {
        let (head, rest) = self.payload.split_at(e.byte_len());
        self.payload = rest;
        head
    }

    fn f32(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let e = self.next(name)?;
        if !e.is_f32() {
            return Err(QuantError::Checkpoint(format!("{name} should be f32")));
        }
        let v = self
            .take(e)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((e.shape.clone(), v))
    }

    fn tensor(&mut self, name: &str) -> Result<Tensor<f32>> {
        let (s, v) = self.f32(name)?;
        Ok(Tensor::from_vec(s, v)?)
    }

    fn i8(&mut self, name: &str, qp: &QParams) -> Result<QWeight> {
        let e = self.next(name)?;
        if e.dtype.as_deref() != Some("i8") {
            return Err(QuantError::Checkpoint(format!("{name} should be i8")));
        }
        if e.scale != Some(qp.scale) || e.zero_point != Some(qp.zero_point) {
            return Err(QuantError::Checkpoint(format!("{name}: scale/zero point disagree with layer metadata")));
        }
        let data = self.take(e).iter().map(|&b| b as i8).collect();
        Ok(QWeight {
            shape: e.shape.clone(),
            data,
            qp: *qp,
        })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(QuantizedModel, Manifest)> {
    let (manifest, payload) = read_frame(bytes)?;
    let section = manifest
        .extra
        .as_ref()
        .and_then(|e| e.get("quant"))
        .ok_or_else(|| QuantError::Checkpoint("no quantization section; this is an f32 checkpoint".into()))?;
    let section: QuantSection =
        serde_json::from_value(section.clone()).map_err(|e| QuantError::Checkpoint(e.to_string()))?;
    let mut r = Reader {
        entries: manifest.tensors.iter(),
        payload,
    };
    let mut float_convs = Vec::new();
    for (i, fc) in section.float_convs.iter().enumerate() {
        let weight = r.tensor(&format!("{}.weight", fc.name))?;
        let bias = r.tensor(&format!("{}.bias", fc.name))?;
        let bn = match fc.bn {
            Some((eps, momentum)) => Some(BatchNorm {
                gamma: r.tensor(&format!("bn{}.gamma", i + 1))?,
                beta: r.tensor(&format!("bn{}.beta", i + 1))?,
                running_mean: r.f32(&format!("bn{}.running_mean", i + 1))?.1,
                running_var: r.f32(&format!("bn{}.running_var", i + 1))?.1,
                eps,
                momentum,
            }),
            None => None,
        };
        float_convs.push(Conv {
            name: fc.name.clone(),
            weight,
            bias,
            bn,
            pool: fc.pool,
        });
    }
    let mut layers = Vec::new();
    for lm in &section.layers {
        let weight = r.i8(&format!("{}.weight", lm.name), &lm.weight)?;
        let (_, bias) = r.f32(&format!("{}.bias", lm.name))?;
        if bias.len() != weight.shape[0] {
            return Err(QuantError::Checkpoint(format!("{}: bias length {}", lm.name, bias.len())));
        }
        layers.push(QLayer {
            name: lm.name.clone(),
            kind: lm.kind,
            weight,
            bias,
            relu: lm.relu,
            pool: lm.pool,
            output: lm.output,
        });
    }
    if r.entries.next().is_some() {
        return Err(QuantError::Checkpoint("unexpected trailing tensors".into()));
    }
    let qm = QuantizedModel {
        mode: section.mode,
        spec: manifest.arch.clone(),
        input: section.input,
        float_convs,
        layers,
    };
    let expected = qm.spec.layer_params()?;
    if expected != qm.layer_params() {
        return Err(QuantError::Checkpoint(format!(
            "layers {:?} do not match architecture {expected:?}",
            qm.layer_params()
        )));
    }
    Ok((qm, manifest))
}

pub fn save_quantized(qm: &QuantizedModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(qm, meta)).map_err(|source| {
        ModelError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

pub fn load_quantized(path: &Path) -> Result<(QuantizedModel, Manifest)> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
