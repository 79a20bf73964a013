use std::io::Write;
use std::path::Path;

use hsib_data::PatchSet;
use hsib_tensor::{Optimizer, OptimizerKind, RngState, Tape, TensorError, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::arch::ModelKind;
use crate::error::{ModelError, Result};
use crate::eval::batch_input;
use crate::graph::ModelGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam,
    Sgd { momentum: f64 },
}

impl From<OptimizerConfig> for OptimizerKind {
    fn from(c: OptimizerConfig) -> Self {
        match c {
            OptimizerConfig::Adam => OptimizerKind::adam(),
            OptimizerConfig::Sgd { momentum } => OptimizerKind::sgd(momentum),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "adam")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub weight_decay: f64,
    /// Stop after this many epochs without a lower mean training loss.
    #[serde(default)]
    pub patience: Option<usize>,
}

fn adam() -> OptimizerConfig {
    OptimizerConfig::Adam
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            optimizer: OptimizerConfig::Adam,
            weight_decay: 0.0,
            patience: Some(20),
        }
    }
}

impl TrainConfig {
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub top1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss", "top1"])?;
        for e in &self.epochs {
            out.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.loss),
                e.top1.map(|t| format!("{t:.4}")).unwrap_or_default(),
            ])?;
        }
        out.flush().map_err(|source| ModelError::Io {
            path: "<history>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(f)
    }
}

/// One mini-batch as fed to the network.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions in the training set.
    pub indices: Vec<usize>,
    pub x: Vec<f32>,
    pub shape: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(kind: ModelKind, data: &PatchSet, indices: &[usize]) -> Self {
        let shape = match kind {
            ModelKind::Mlp => vec![indices.len(), data.channels()],
            ModelKind::Cnn1d => vec![indices.len(), 1, data.channels()],
            ModelKind::Cnn2d => vec![indices.len(), data.channels(), data.patch_size(), data.patch_size()],
        };
        Self {
            indices: indices.to_vec(),
            x: batch_input(kind, data, indices),
            shape,
            labels: data.batch_labels(indices),
        }
    }
}

/// Anything whose parameters an optimizer can update.
pub trait Trainable {
    fn trainable_params(&mut self) -> Vec<&mut Tensor<f32>>;
    fn set_training(&mut self, on: bool);
}

impl Trainable for ModelGraph<f32> {
    fn trainable_params(&mut self) -> Vec<&mut Tensor<f32>> {
        self.params_mut().into_iter().filter(|p| p.requires_grad()).collect()
    }

    fn set_training(&mut self, on: bool) {
        ModelGraph::set_training(self, on)
    }
}

/// Per-step context handed to a loss closure.
pub struct StepCtx<'a> {
    pub epoch: usize,
    pub step: usize,
    pub rng: &'a mut RngState,
}

/// Shuffled mini-batches; a trailing batch of one sample is merged into the
/// previous batch because batch norm cannot train on a single sample.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    let mut out: Vec<Vec<usize>> = perm.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

fn diverged(epoch: usize, e: ModelError) -> ModelError {
    match e {
        ModelError::Tensor(TensorError::NonFinite { op }) => ModelError::Diverged {
            epoch,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Generic mini-batch loop. `step` builds the loss on a fresh tape;
/// `epoch_end` may adjust the model and optionally report an evaluation
/// accuracy for the history.
pub fn fit<M: Trainable>(
    model: &mut M,
    data: &PatchSet,
    kind: ModelKind,
    cfg: &TrainConfig,
    rng: &mut RngState,
    mut step: impl FnMut(&mut M, &mut Tape<f32>, &Batch, &mut StepCtx) -> Result<Var>,
    mut epoch_end: impl FnMut(&mut M, usize) -> Result<Option<f64>>,
) -> Result<History> {
    if data.is_empty() {
        return Err(ModelError::Empty("training set"));
    }
    let mut opt = Optimizer::<f32>::new(cfg.optimizer.into(), cfg.lr)?.with_weight_decay(cfg.weight_decay);
    let mut history = History::default();
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut global_step = 0;
    for epoch in 1..=cfg.epochs {
        model.set_training(true);
        let mut total = 0.0;
        let mut seen = 0usize;
        for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
            let batch = Batch::gather(kind, data, &idx);
            let mut tape = Tape::new();
            let mut ctx = StepCtx {
                epoch,
                step: global_step,
                rng,
            };
            let loss = step(model, &mut tape, &batch, &mut ctx).map_err(|e| diverged(epoch, e))?;
            let lv = tape.item(loss) as f64;
            if !lv.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    msg: "loss is not finite".into(),
                });
            }
            let grads = tape.backward(loss).map_err(|e| diverged(epoch, e.into()))?;
            let mut params = model.trainable_params();
            for p in params.iter_mut() {
                p.zero_grad();
                grads.apply_to(p);
            }
            opt.step(&mut params).map_err(|e| diverged(epoch, e.into()))?;
            total += lv * batch.len() as f64;
            seen += batch.len();
            global_step += 1;
        }
        let loss = total / seen as f64;
        let top1 = epoch_end(model, epoch)?;
        log::debug!("epoch {epoch}: loss {loss:.5}");
        history.epochs.push(EpochRecord { epoch, loss, top1 });
        if loss < best {
            best = loss;
            best_epoch = epoch;
        }
        if let Some(p) = cfg.patience {
            if epoch - best_epoch >= p {
                break;
            }
        }
    }
    model.set_training(false);
    Ok(history)
}

/// Plain supervised training with mean cross entropy.
pub fn train(model: &mut ModelGraph<f32>, data: &PatchSet, cfg: &TrainConfig, rng: &mut RngState) -> Result<History> {
    if data.channels() != model.spec.in_channels
        || (model.spec.kind == ModelKind::Cnn2d && data.patch_size() != model.spec.patch)
    {
        return Err(ModelError::Spec(format!(
            "data has {} channels and patch {}, model expects {} and {}",
            data.channels(),
            data.patch_size(),
            model.spec.in_channels,
            model.spec.patch
        )));
    }
    let kind = model.spec.kind;
    fit(
        model,
        data,
        kind,
        cfg,
        rng,
        |m, tape, b, _| {
            let x = tape.input(b.shape.clone(), b.x.clone())?;
            let f = m.forward(tape, x)?;
            Ok(tape.cross_entropy(f.logits, &b.labels)?)
        },
        |_, _| Ok(None),
    )
}
