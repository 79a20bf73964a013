use hsib_data::PatchSet;
use hsib_tensor::Real;
use serde::Serialize;

use crate::error::{ModelError, Result};
use crate::graph::ModelGraph;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Percent in `[0, 100]`.
    pub top1: f64,
    pub top5: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

/// Position of the true class when logits are sorted descending, with ties
/// ranked in favour of the lower class index.
pub fn rank_of<T: PartialOrd + Copy>(logits: &[T], label: usize) -> usize {
    let v = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

/// Highest logit, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(logits: &[T]) -> usize {
    let mut best = 0;
    for (j, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = j;
        }
    }
    best
}

/// Accumulates top-k hits and a confusion matrix from logit rows.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    classes: usize,
    hit1: usize,
    hit5: usize,
    n: usize,
    confusion: Vec<Vec<usize>>,
}

impl MetricsAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            hit1: 0,
            hit5: 0,
            n: 0,
            confusion: vec![vec![0; classes]; classes],
        }
    }

    pub fn add<T: PartialOrd + Copy>(&mut self, logits: &[T], labels: &[usize]) {
        for (row, &y) in logits.chunks(self.classes).zip(labels) {
            let r = rank_of(row, y);
            self.hit1 += (r < 1) as usize;
            self.hit5 += (r < 5) as usize;
            self.confusion[y][argmax(row)] += 1;
            self.n += 1;
        }
    }

    pub fn finish(self) -> Result<Metrics> {
        if self.n == 0 {
            return Err(ModelError::Empty("evaluation set"));
        }
        Ok(Metrics {
            top1: 100.0 * self.hit1 as f64 / self.n as f64,
            top5: 100.0 * self.hit5 as f64 / self.n as f64,
            confusion: self.confusion,
            samples: self.n,
        })
    }
}

/// Flat model input for the selected patches: full patches for CNN2D, centre
/// spectra otherwise.
pub fn batch_input(model_kind: crate::ModelKind, patches: &PatchSet, idx: &[usize]) -> Vec<f32> {
    match model_kind {
        crate::ModelKind::Cnn2d => patches.batch(idx),
        _ => patches.spectra(idx),
    }
}

pub const EVAL_BATCH: usize = 256;

/// Evaluates in eval mode; the model's mode is restored afterwards.
pub fn evaluate<T: Real>(model: &mut ModelGraph<T>, patches: &PatchSet) -> Result<Metrics> {
    if patches.is_empty() {
        return Err(ModelError::Empty("evaluation set"));
    }
    let was = model.is_training();
    model.set_training(false);
    let mut acc = MetricsAccumulator::new(model.classes());
    let idx: Vec<usize> = (0..patches.len()).collect();
    let result = (|| {
        for chunk in idx.chunks(EVAL_BATCH) {
            let x: Vec<T> = batch_input(model.spec.kind, patches, chunk)
                .into_iter()
                .map(|v| T::lit(v as f64))
                .collect();
            let logits = model.logits(&x, chunk.len())?;
            acc.add(&logits, &patches.batch_labels(chunk));
        }
        Ok::<_, ModelError>(())
    })();
    model.set_training(was);
    result?;
    acc.finish()
}
