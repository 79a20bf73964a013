//! Single-sample inference timing.

use std::hint::black_box;
use std::time::Instant;

use hsib_data::PatchSet;
use hsib_models::eval::batch_input;
use hsib_models::{ModelGraph, ModelKind};
use hsib_quant::QuantizedModel;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const MIN_REPS: usize = 30;
pub const MIN_PROBES: usize = 100;
pub const WARMUP: usize = 10;

/// Anything that maps a batch of inputs to logits.
pub trait Classifier {
    fn kind(&self) -> ModelKind;
    fn predict(&mut self, x: &[f32], n: usize) -> Result<Vec<f32>>;
}

impl Classifier for ModelGraph<f32> {
    fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    fn predict(&mut self, x: &[f32], n: usize) -> Result<Vec<f32>> {
        self.set_training(false);
        Ok(self.logits(x, n)?)
    }
}

impl Classifier for QuantizedModel {
    fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    fn predict(&mut self, x: &[f32], n: usize) -> Result<Vec<f32>> {
        Ok(self.logits(x, n)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    /// Median batch-1 forward time, ms per sample.
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
    pub reps: usize,
}

impl LatencyStats {
    pub fn iqr_ms(&self) -> f64 {
        self.q3_ms - self.q1_ms
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times `reps` batch-1 forward passes, cycling through the probe patches,
/// after [`WARMUP`] discarded passes. Runs on the calling thread.
pub fn measure_latency(model: &mut dyn Classifier, probes: &PatchSet, reps: usize) -> Result<LatencyStats> {
    if probes.is_empty() {
        return Err(BenchError::Latency("empty probe set".into()));
    }
    if probes.len() < MIN_PROBES {
        return Err(BenchError::Latency(format!(
            "need at least {MIN_PROBES} probe samples, got {}",
            probes.len()
        )));
    }
    if reps < MIN_REPS {
        return Err(BenchError::Latency(format!("need at least {MIN_REPS} repetitions, got {reps}")));
    }
    let kind = model.kind();
    let inputs: Vec<Vec<f32>> = (0..probes.len()).map(|i| batch_input(kind, probes, &[i])).collect();
    for x in inputs.iter().cycle().take(WARMUP) {
        black_box(model.predict(black_box(x), 1)?);
    }
    let mut times = Vec::with_capacity(reps);
    for x in inputs.iter().cycle().take(reps) {
        let t0 = Instant::now();
        let out = model.predict(black_box(x), 1)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        black_box(out);
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        median_ms: quantile(&times, 0.5),
        q1_ms: quantile(&times, 0.25),
        q3_ms: quantile(&times, 0.75),
        reps,
    })
}
