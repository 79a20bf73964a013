//! Quantized models and their integer inference path.

use std::fmt;
use std::str::FromStr;

use hsib_data::PatchSet;
use hsib_models::arch::POOL;
use hsib_models::eval::{batch_input, EVAL_BATCH};
use hsib_models::{ArchSpec, Conv, Dense, Metrics, MetricsAccumulator, ModelKind};
use hsib_tensor::{im2col, ConvGeom, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::kernels::affine_gemm;
use crate::qparams::{minmax_qparams, QParams};

/// Bits used for every stored weight and activation.
pub const BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// FC weights int8, activations quantized per batch at run time.
    Dynamic,
    /// Weights and activations int8 with calibrated ranges.
    Static,
    /// Like static, with ranges and weights learned through fake quantization.
    Qat,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::Dynamic => "dynamic",
            QuantMode::Static => "static",
            QuantMode::Qat => "qat",
        })
    }
}

impl FromStr for QuantMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dynamic" => Ok(QuantMode::Dynamic),
            "static" => Ok(QuantMode::Static),
            "qat" => Ok(QuantMode::Qat),
            _ => Err(format!("unknown quantization mode {s:?} (expected dynamic, static or qat)")),
        }
    }
}

/// Per-tensor int8 weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QWeight {
    pub shape: Vec<usize>,
    pub data: Vec<i8>,
    pub qp: QParams,
}

impl QWeight {
    /// Signed 8-bit quantization over the tensor's min/max.
    pub fn quantize(w: &Tensor<f32>) -> Result<Self> {
        let qp = minmax_qparams(w.data(), BITS, true)?;
        Ok(Self {
            shape: w.shape().to_vec(),
            data: w.data().iter().map(|&v| qp.quantize(v as f64) as i8).collect(),
            qp,
        })
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.data.iter().map(|&q| qp_deq(&self.qp, q as i32)).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn widened(&self) -> Vec<i32> {
        self.data.iter().map(|&v| v as i32).collect()
    }
}

fn qp_deq(qp: &QParams, q: i32) -> f32 {
    qp.dequantize(q as i64) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QLayerKind {
    Conv2d,
    Conv1d,
    Dense,
}

/// A conv or FC layer with int8 weights and f32 bias.
#[derive(Debug, Clone, PartialEq)]
pub struct QLayer {
    pub name: String,
    pub kind: QLayerKind,
    pub weight: QWeight,
    pub bias: Vec<f32>,
    pub relu: bool,
    pub pool: bool,
    /// Output range, fixed for static and QAT models. `None` leaves the
    /// output in f32 (dynamic mode).
    pub output: Option<QParams>,
}

impl QLayer {
    pub fn from_conv(c: &Conv<f32>, output: Option<QParams>) -> Result<Self> {
        Ok(Self {
            name: c.name.clone(),
            kind: if c.is_2d() { QLayerKind::Conv2d } else { QLayerKind::Conv1d },
            weight: QWeight::quantize(&c.weight)?,
            bias: c.bias.data().to_vec(),
            relu: true,
            pool: c.pool,
            output,
        })
    }

    pub fn from_dense(d: &Dense<f32>, output: Option<QParams>) -> Result<Self> {
        Ok(Self {
            name: d.name.clone(),
            kind: QLayerKind::Dense,
            weight: QWeight::quantize(&d.weight)?,
            bias: d.bias.data().to_vec(),
            relu: d.relu,
            pool: false,
            output,
        })
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[0]
    }
}

/// A converted model. Immutable once built, so inference may run from
/// several threads.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub mode: QuantMode,
    pub spec: ArchSpec,
    /// Range of the model input (static and QAT).
    pub input: Option<QParams>,
    /// Conv layers kept in f32 with eval-mode batch norm (dynamic).
    pub float_convs: Vec<Conv<f32>>,
    pub layers: Vec<QLayer>,
}

enum Act {
    Float(Vec<f32>),
    Quant(Vec<i32>, QParams),
}

/// Per-sample input dims for a model kind.
pub(crate) fn sample_dims(spec: &ArchSpec) -> Vec<usize> {
    match spec.kind {
        ModelKind::Cnn2d => vec![spec.in_channels, spec.patch, spec.patch],
        ModelKind::Cnn1d => vec![1, spec.in_channels],
        ModelKind::Mlp => vec![spec.in_channels],
    }
}

/// Max pooling over non-overlapping `wh x ww` windows of `[planes, h, w]`,
/// dropping any remainder.
pub(crate) fn max_pool<E: Copy + PartialOrd>(x: &[E], planes: usize, h: usize, w: usize, wh: usize, ww: usize) -> Vec<E> {
    let (oh, ow) = (h / wh, w / ww);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = x[base + y * wh * w + xo * ww];
                for i in 0..wh {
                    for j in 0..ww {
                        let v = x[base + (y * wh + i) * w + xo * ww + j];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Pools `x` (`n` samples of `dims`) and returns the new dims.
pub(crate) fn pool_dims<E: Copy + PartialOrd>(x: &[E], n: usize, dims: &[usize]) -> (Vec<E>, Vec<usize>) {
    match dims {
        [c, h, w] => (max_pool(x, n * c, *h, *w, POOL, POOL), vec![*c, h / POOL, w / POOL]),
        [c, l] => (max_pool(x, n * c, 1, *l, 1, POOL), vec![*c, l / POOL]),
        _ => (x.to_vec(), dims.to_vec()),
    }
}

fn conv_geom(dims: &[usize], kind: QLayerKind, wshape: &[usize]) -> Result<ConvGeom> {
    let bad = || QuantError::Shape {
        op: "conv",
        msg: format!("input {dims:?} does not fit weight {wshape:?}"),
    };
    let g = match (kind, dims) {
        (QLayerKind::Conv2d, [c, h, w]) => ConvGeom {
            in_channels: *c,
            height: *h,
            width: *w,
            kernel_h: wshape[2],
            kernel_w: wshape[3],
        },
        (QLayerKind::Conv1d, [c, l]) => ConvGeom {
            in_channels: *c,
            height: 1,
            width: *l,
            kernel_h: 1,
            kernel_w: wshape[2],
        },
        _ => return Err(bad()),
    };
    if g.in_channels != wshape[1] || g.kernel_h > g.height || g.kernel_w > g.width {
        return Err(bad());
    }
    Ok(g)
}

/// f32 conv + eval BN + ReLU, before pooling.
pub(crate) fn float_conv(c: &Conv<f32>, x: Vec<f32>, n: usize, dims: &[usize]) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut tape = Tape::<f32>::new();
    let mut shape = vec![n];
    shape.extend_from_slice(dims);
    let xv = tape.input(shape, x)?;
    let w = tape.constant(&c.weight);
    let b = tape.constant(&c.bias);
    let mut h = if c.is_2d() {
        tape.conv2d(xv, w, Some(b))?
    } else {
        tape.conv1d(xv, w, Some(b))?
    };
    if let Some(bn) = &c.bn {
        let g = tape.constant(&bn.gamma);
        let be = tape.constant(&bn.beta);
        h = tape.batch_norm_eval(h, g, be, &bn.running_mean, &bn.running_var, bn.eps as f32)?;
    }
    h = tape.relu(h)?;
    let out_dims = tape.shape(h)[1..].to_vec();
    Ok((tape.value(h).to_vec(), out_dims))
}

/// f32 dense layer with optional ReLU.
pub(crate) fn float_dense(d: &Dense<f32>, x: Vec<f32>, n: usize) -> Result<Vec<f32>> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.input(vec![n, d.in_features()], x)?;
    let w = tape.constant(&d.weight);
    let b = tape.constant(&d.bias);
    let mut h = tape.linear(xv, w, Some(b))?;
    if d.relu {
        h = tape.relu(h)?;
    }
    Ok(tape.value(h).to_vec())
}

impl QuantizedModel {
    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Logits for a flat batch of `n` inputs.
    pub fn logits(&self, input: &[f32], n: usize) -> Result<Vec<f32>> {
        let mut dims = sample_dims(&self.spec);
        let want = n * dims.iter().product::<usize>();
        if input.len() != want || n == 0 {
            return Err(QuantError::Shape {
                op: "logits",
                msg: format!("{} values for {n} samples of {dims:?}", input.len()),
            });
        }
        let mut x = input.to_vec();
        for c in &self.float_convs {
            let (y, d) = float_conv(c, x, n, &dims)?;
            (x, dims) = if c.pool { pool_dims(&y, n, &d) } else { (y, d) };
        }
        let mut act = match self.input {
            Some(qp) => Act::Quant(qp.quantize_slice(&x), qp),
            None => Act::Float(x),
        };
        for l in &self.layers {
            let (xq, xqp) = match act {
                Act::Quant(q, qp) => (q, qp),
                Act::Float(v) => {
                    // dynamic: range of this very batch
                    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
                    let qp = minmax_qparams(&v, BITS, lo < 0.0)?;
                    (qp.quantize_slice(&v), qp)
                }
            };
            let (real, out_dims) = self.run_layer(l, &xq, &xqp, n, &dims)?;
            dims = out_dims;
            act = match l.output {
                Some(qp) => {
                    let q = qp.quantize_slice(&real);
                    let (q, d) = if l.pool { pool_dims(&q, n, &dims) } else { (q, dims.clone()) };
                    dims = d;
                    Act::Quant(q, qp)
                }
                None => {
                    let (v, d) = if l.pool { pool_dims(&real, n, &dims) } else { (real, dims.clone()) };
                    dims = d;
                    Act::Float(v)
                }
            };
        }
        Ok(match act {
            Act::Float(v) => v,
            Act::Quant(q, qp) => qp.dequantize_slice(&q),
        })
    }

    /// Integer product, then `S_x S_w acc + bias` and the optional ReLU in
    /// f32. Returns the values before pooling.
    fn run_layer(&self, l: &QLayer, xq: &[i32], xqp: &QParams, n: usize, dims: &[usize]) -> Result<(Vec<f32>, Vec<usize>)> {
        let w = l.weight.widened();
        let (zx, zw) = (xqp.zero_point, l.weight.qp.zero_point);
        let sxw = xqp.scale * l.weight.qp.scale;
        let out = l.out_features();
        let finish = |acc: i64, o: usize| {
            let v = (sxw * acc as f64) as f32 + l.bias[o];
            if l.relu {
                v.max(0.0)
            } else {
                v
            }
        };
        match l.kind {
            QLayerKind::Dense => {
                let f: usize = dims.iter().product();
                if f != l.weight.shape[1] {
                    return Err(QuantError::Shape {
                        op: "dense",
                        msg: format!("{f} inputs for weight {:?}", l.weight.shape),
                    });
                }
                let mut xt = vec![0i32; f * n];
                for s in 0..n {
                    for p in 0..f {
                        xt[p * n + s] = xq[s * f + p];
                    }
                }
                let acc = affine_gemm(out, f, n, &w, zw, &xt, zx)?;
                let mut y = vec![0f32; n * out];
                for o in 0..out {
                    for s in 0..n {
                        y[s * out + o] = finish(acc[o * n + s], o);
                    }
                }
                Ok((y, vec![out]))
            }
            kind => {
                let g = conv_geom(dims, kind, &l.weight.shape)?;
                let (pl, pos) = (g.patch_len(), g.positions());
                let mut col = vec![0i32; pl * pos];
                let mut y = Vec::with_capacity(n * out * pos);
                for smp in xq.chunks(g.input_len()) {
                    im2col(smp, &g, &mut col);
                    let acc = affine_gemm(out, pl, pos, &w, zw, &col, zx)?;
                    y.extend(acc.iter().enumerate().map(|(i, &a)| finish(a, i / pos)));
                }
                let d = if kind == QLayerKind::Conv2d {
                    vec![out, g.out_h(), g.out_w()]
                } else {
                    vec![out, g.out_w()]
                };
                Ok((y, d))
            }
        }
    }

    pub fn evaluate(&self, patches: &PatchSet) -> Result<Metrics> {
        if patches.is_empty() {
            return Err(hsib_models::ModelError::Empty("evaluation set").into());
        }
        let mut acc = MetricsAccumulator::new(self.classes());
        let idx: Vec<usize> = (0..patches.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let x = batch_input(self.spec.kind, patches, chunk);
            acc.add(&self.logits(&x, chunk.len())?, &patches.batch_labels(chunk));
        }
        Ok(acc.finish()?)
    }

    /// Stored bytes per parameter by layer: 1 for int8 layers, 4 for f32.
    pub fn dtype_map(&self) -> hsib_models::DtypeMap {
        let mut m = hsib_models::DtypeMap::new();
        for c in &self.float_convs {
            m.insert(c.name.clone(), 4);
        }
        for l in &self.layers {
            m.insert(l.name.clone(), 1);
        }
        m
    }

    /// Weight plus bias counts per layer, in execution order.
    pub fn layer_params(&self) -> Vec<(String, usize)> {
        let mut v: Vec<_> = self
            .float_convs
            .iter()
            .map(|c| (c.name.clone(), c.weight.len() + c.bias.len()))
            .collect();
        v.extend(self.layers.iter().map(|l| (l.name.clone(), l.weight.len() + l.bias.len())));
        v
    }

    /// Decimal megabytes, counted the same way as the f32 estimator.
    pub fn memory_mb(&self) -> f64 {
        let dt = self.dtype_map();
        let bytes: usize = self.layer_params().iter().map(|(n, c)| c * dt[n]).sum();
        bytes as f64 / 1e6
    }
}
