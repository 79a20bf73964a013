//! Quantization-aware training.
//!
//! BN is folded first, then the network trains with fake quantization on
//! every conv/FC weight and activation. Weight ranges are the current
//! min/max of each tensor; activation ranges follow EMA observers seeded by
//! a min/max calibration pass, so converting before any training step gives
//! the static model.

use hsib_data::PatchSet;
use hsib_models::{fit, History, Layer, ModelError, ModelGraph, TrainConfig, Trainable};
use hsib_models::arch::POOL;
use hsib_tensor::{RngState, Tape, Tensor, Var};

use crate::convert::{assemble, calibrate, CalibConfig};
use crate::error::{QuantError, Result};
use crate::fold::fold_batch_norm;
use crate::model::{QuantMode, QuantizedModel, BITS};
use crate::observer::{Observer, ObserverRule};
use crate::qparams::{minmax_qparams, QParams};

pub const EMA_DECAY: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct QatConfig {
    pub train: TrainConfig,
    pub ema_decay: f64,
    /// Seeds the activation observers from the training data.
    pub calib: CalibConfig,
}

impl QatConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            ema_decay: EMA_DECAY,
            calib: CalibConfig::default(),
        }
    }
}

/// A BN-free model plus its activation observers.
#[derive(Debug, Clone)]
pub struct QatModel {
    pub model: ModelGraph<f32>,
    pub observers: Vec<Observer>,
}

fn fake(tape: &mut Tape<f32>, v: Var, qp: &QParams) -> Result<Var> {
    Ok(tape.fake_quant(v, qp.scale as f32, qp.zero_point, qp.qmin, qp.qmax)?)
}

impl QatModel {
    pub fn new(model: &ModelGraph<f32>, calib: &PatchSet, cfg: &QatConfig) -> Result<Self> {
        let mut folded = fold_batch_norm(model);
        folded.set_trainable(true);
        let observers = calibrate(&folded, calib, &cfg.calib)?
            .iter()
            .map(|o| o.seeded(ObserverRule::Ema(cfg.ema_decay)))
            .collect();
        Ok(Self { model: folded, observers })
    }

    /// Fake-quantized forward pass. In training mode the activation
    /// observers see each batch before its ranges are used.
    pub fn forward(&mut self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let training = self.model.is_training();
        let obs = &mut self.observers;
        let mut observe = |k: usize, tape: &mut Tape<f32>, v: Var| -> Result<Var> {
            if training {
                obs[k].update(tape.value(v));
            }
            let qp = obs[k].qparams(BITS)?;
            fake(tape, v, &qp)
        };
        let weight = |tape: &mut Tape<f32>, w: &Tensor<f32>| -> Result<Var> {
            let qp = minmax_qparams(w.data(), BITS, true)?;
            let v = tape.param(w);
            fake(tape, v, &qp)
        };
        let mut h = observe(0, tape, x)?;
        let mut k = 1;
        for l in &self.model.layers {
            match l {
                Layer::Conv(c) => {
                    let w = weight(tape, &c.weight)?;
                    let b = tape.param(&c.bias);
                    h = if c.is_2d() {
                        tape.conv2d(h, w, Some(b))?
                    } else {
                        tape.conv1d(h, w, Some(b))?
                    };
                    h = tape.relu(h)?;
                    h = observe(k, tape, h)?;
                    if c.pool {
                        h = if c.is_2d() {
                            tape.max_pool2d(h, POOL, POOL)?
                        } else {
                            tape.max_pool1d(h, POOL)?
                        };
                    }
                    k += 1;
                }
                Layer::Flatten => h = tape.flatten(h)?,
                Layer::Dense(d) => {
                    let w = weight(tape, &d.weight)?;
                    let b = tape.param(&d.bias);
                    h = tape.linear(h, w, Some(b))?;
                    if d.relu {
                        h = tape.relu(h)?;
                    }
                    h = observe(k, tape, h)?;
                    k += 1;
                }
            }
        }
        Ok(h)
    }

    /// Freezes the observed ranges and emits int8 weights.
    pub fn convert(&self) -> Result<QuantizedModel> {
        assemble(&self.model, &self.observers, QuantMode::Qat)
    }
}

impl Trainable for QatModel {
    fn trainable_params(&mut self) -> Vec<&mut Tensor<f32>> {
        self.model.trainable_params()
    }

    fn set_training(&mut self, on: bool) {
        self.model.set_training(on)
    }
}

fn to_model_error(e: QuantError) -> ModelError {
    match e {
        QuantError::Model(m) => m,
        QuantError::Tensor(t) => t.into(),
        other => ModelError::Step(other.to_string()),
    }
}

/// Fine-tunes `model` with fake quantization and converts the result.
pub fn qat_train(
    model: &ModelGraph<f32>,
    data: &PatchSet,
    cfg: &QatConfig,
    rng: &mut RngState,
) -> Result<(QuantizedModel, History, QatModel)> {
    let mut qm = QatModel::new(model, data, cfg)?;
    let kind = model.spec.kind;
    let history = fit(
        &mut qm,
        data,
        kind,
        &cfg.train,
        rng,
        |m, tape, batch, _| {
            let x = tape.input(batch.shape.clone(), batch.x.clone())?;
            let logits = m.forward(tape, x).map_err(to_model_error)?;
            Ok(tape.cross_entropy(logits, &batch.labels)?)
        },
        |_, _| Ok(None),
    )?;
    Ok((qm.convert()?, history, qm))
}
