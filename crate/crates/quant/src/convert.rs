//! Post-training conversion: dynamic and static quantization.

use hsib_data::PatchSet;
use hsib_models::eval::batch_input;
use hsib_models::{Layer, ModelGraph};

use crate::error::{QuantError, Result};
use crate::fold::fold_batch_norm;
use crate::model::{float_conv, float_dense, pool_dims, sample_dims, QLayer, QuantMode, QuantizedModel, BITS};
use crate::observer::{Observer, ObserverRule};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibConfig {
    pub batch_size: usize,
    /// Use at most this many samples, taken in order.
    pub max_samples: Option<usize>,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_samples: None,
        }
    }
}

/// FC weights to int8; conv layers stay f32. Needs no data: FC inputs are
/// quantized per batch at inference time.
pub fn dynamic_quantize(model: &ModelGraph<f32>) -> Result<QuantizedModel> {
    let mut float_convs = Vec::new();
    let mut layers = Vec::new();
    for l in &model.layers {
        match l {
            Layer::Conv(c) => float_convs.push(c.clone()),
            Layer::Dense(d) => layers.push(QLayer::from_dense(d, None)?),
            Layer::Flatten => {}
        }
    }
    Ok(QuantizedModel {
        mode: QuantMode::Dynamic,
        spec: model.spec.clone(),
        input: None,
        float_convs,
        layers,
    })
}

/// One observer for the input and one per conv/FC output. Outputs that
/// pass through a ReLU get unsigned ranges.
pub fn new_observers(model: &ModelGraph<f32>, rule: ObserverRule) -> Vec<Observer> {
    let mut obs = vec![Observer::new("input", rule, true)];
    for l in &model.layers {
        match l {
            Layer::Conv(c) => obs.push(Observer::new(c.name.clone(), rule, false)),
            Layer::Dense(d) => obs.push(Observer::new(d.name.clone(), rule, !d.relu)),
            Layer::Flatten => {}
        }
    }
    obs
}

/// Runs the f32 model on one batch and feeds every observation point.
pub fn observe_batch(model: &ModelGraph<f32>, x: Vec<f32>, n: usize, obs: &mut [Observer]) -> Result<()> {
    let mut dims = sample_dims(&model.spec);
    obs[0].update(&x);
    let mut x = x;
    let mut k = 1;
    for l in &model.layers {
        match l {
            Layer::Conv(c) => {
                let (y, d) = float_conv(c, x, n, &dims)?;
                obs[k].update(&y);
                (x, dims) = if c.pool { pool_dims(&y, n, &d) } else { (y, d) };
                k += 1;
            }
            Layer::Dense(d) => {
                x = float_dense(d, x, n)?;
                dims = vec![d.out_features()];
                obs[k].update(&x);
                k += 1;
            }
            Layer::Flatten => dims = vec![dims.iter().product()],
        }
    }
    Ok(())
}

fn calib_indices(calib: &PatchSet, cfg: &CalibConfig) -> Result<Vec<usize>> {
    let n = cfg.max_samples.map_or(calib.len(), |m| m.min(calib.len()));
    if n == 0 {
        return Err(QuantError::NoCalibration);
    }
    Ok((0..n).collect())
}

/// Min/max observers filled by one pass over the calibration patches.
pub fn calibrate(model: &ModelGraph<f32>, calib: &PatchSet, cfg: &CalibConfig) -> Result<Vec<Observer>> {
    let idx = calib_indices(calib, cfg)?;
    let mut obs = new_observers(model, ObserverRule::MinMax);
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        observe_batch(model, batch_input(model.spec.kind, calib, chunk), chunk.len(), &mut obs)?;
    }
    Ok(obs)
}

/// Builds an integer model from a BN-free f32 model and filled observers.
pub fn assemble(folded: &ModelGraph<f32>, obs: &[Observer], mode: QuantMode) -> Result<QuantizedModel> {
    let mut layers = Vec::new();
    let mut k = 1;
    for l in &folded.layers {
        match l {
            Layer::Conv(c) => {
                if c.bn.is_some() {
                    return Err(QuantError::Shape {
                        op: "assemble",
                        msg: format!("{} still has batch norm; fold it first", c.name),
                    });
                }
                layers.push(QLayer::from_conv(c, Some(obs[k].qparams(BITS)?))?);
                k += 1;
            }
            Layer::Dense(d) => {
                layers.push(QLayer::from_dense(d, Some(obs[k].qparams(BITS)?))?);
                k += 1;
            }
            Layer::Flatten => {}
        }
    }
    Ok(QuantizedModel {
        mode,
        spec: folded.spec.clone(),
        input: Some(obs[0].qparams(BITS)?),
        float_convs: Vec::new(),
        layers,
    })
}

/// Folds BN, calibrates activation ranges on `calib`, and quantizes every
/// conv and FC layer.
pub fn static_quantize(model: &ModelGraph<f32>, calib: &PatchSet, cfg: &CalibConfig) -> Result<QuantizedModel> {
    let folded = fold_batch_norm(model);
    let obs = calibrate(&folded, calib, cfg)?;
    for o in &obs {
        log::debug!("observer {}: {:?}", o.name, o.range());
    }
    assemble(&folded, &obs, QuantMode::Static)
}
