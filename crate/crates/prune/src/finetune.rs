//! The three fine-tuning schedules and the from-scratch baseline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use hsib_data::PatchSet;
use hsib_models::{count_params, evaluate, save_checkpoint, train, ArchSpec, CheckpointMeta, ModelGraph, TrainConfig};
use hsib_tensor::RngState;
use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};
use crate::ranking::{fc1_l1, filter_l2, rank_l1, FilterRanking, LayerRanking};
use crate::slimming::rank_slimming;
use crate::surgery::{apply_prune, prune_layer};
use crate::target::{PrunableLayer, PruneTarget};
use crate::thinet::{rank_thinet, ThinetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Prune once, retrain once.
    I,
    /// Prune one layer at a time (conv1, conv2, fc1), retraining after each.
    II,
    /// Prune the whole network in several passes toward the target.
    III,
}

impl FromStr for Strategy {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "i" | "1" => Ok(Strategy::I),
            "II" | "ii" | "2" => Ok(Strategy::II),
            "III" | "iii" | "3" => Ok(Strategy::III),
            other => Err(PruneError::Strategy(other.to_string())),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::I => "I",
            Strategy::II => "II",
            Strategy::III => "III",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Optimizer and batch settings; `epochs` is replaced per stage.
    pub train: TrainConfig,
    pub epochs_one_shot: usize,
    pub epochs_per_layer: usize,
    pub epochs_per_pass: usize,
    pub passes: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            epochs_one_shot: 50,
            epochs_per_layer: 20,
            epochs_per_pass: 30,
            passes: 3,
        }
    }
}

/// Produces a ranking for the model as it currently stands.
pub trait Ranker {
    fn method(&self) -> &str;
    /// Criterion used for fc1 neurons.
    fn fc_criterion(&self) -> &str {
        "l1 of incoming weights"
    }
    fn rank(&mut self, model: &mut ModelGraph<f32>) -> Result<FilterRanking>;
}

pub struct L1Ranker;

impl Ranker for L1Ranker {
    fn method(&self) -> &str {
        "l1"
    }

    fn rank(&mut self, model: &mut ModelGraph<f32>) -> Result<FilterRanking> {
        rank_l1(model)
    }
}

pub struct ThinetRanker<'a> {
    pub calib: &'a PatchSet,
    pub cfg: ThinetConfig,
}

impl Ranker for ThinetRanker<'_> {
    fn method(&self) -> &str {
        "thinet"
    }

    fn rank(&mut self, model: &mut ModelGraph<f32>) -> Result<FilterRanking> {
        rank_thinet(model, self.calib, &self.cfg)
    }
}

/// Ranks by BN scale magnitude; train with `train_slimming` first.
pub struct SlimmingRanker;

impl Ranker for SlimmingRanker {
    fn method(&self) -> &str {
        "slimming"
    }

    fn rank(&mut self, model: &mut ModelGraph<f32>) -> Result<FilterRanking> {
        rank_slimming(model)
    }
}

/// Ranks conv filters by L2 norm, as at the end of soft filter pruning.
pub struct SfpRanker;

impl Ranker for SfpRanker {
    fn method(&self) -> &str {
        "sfp"
    }

    fn rank(&mut self, model: &mut ModelGraph<f32>) -> Result<FilterRanking> {
        crate::ranking::require_two_convs(model)?;
        Ok(FilterRanking {
            method: "sfp".into(),
            layers: vec![
                LayerRanking::from_scores(PrunableLayer::Conv1, filter_l2(model.conv(0)))?,
                LayerRanking::from_scores(PrunableLayer::Conv2, filter_l2(model.conv(1)))?,
                fc1_l1(model)?,
            ],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub widths: [usize; 3],
    pub params: usize,
    /// Accuracy right after surgery, before retraining.
    pub top1_pruned: Option<f64>,
    pub top1: Option<f64>,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub method: String,
    pub strategy: Strategy,
    pub ratio_label: String,
    /// Exact fraction of conv/FC parameters removed.
    pub exact_reduction: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub top1_before: Option<f64>,
    pub fc_criterion: String,
    pub stages: Vec<StageRecord>,
}

/// Data and output locations shared by every stage.
#[derive(Clone, Copy)]
pub struct PruneRun<'a> {
    pub train: &'a PatchSet,
    pub eval: Option<&'a PatchSet>,
    /// Intermediate checkpoints are written here, one per stage.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Widths for each pass of strategy III: geometric interpolation between
/// the original and the target, rounded, ending exactly on the target.
pub fn iterative_widths(orig: [usize; 3], target: [usize; 3], passes: usize) -> Vec<[usize; 3]> {
    let passes = passes.max(1);
    let mut out: Vec<[usize; 3]> = Vec::with_capacity(passes);
    for j in 1..=passes {
        let mut w = [0; 3];
        for i in 0..3 {
            let ratio = target[i] as f64 / orig[i] as f64;
            let v = (orig[i] as f64 * ratio.powf(j as f64 / passes as f64)).round() as usize;
            let prev = out.last().map_or(orig[i], |p| p[i]);
            w[i] = v.clamp(target[i], prev);
        }
        if j == passes {
            w = target;
        }
        out.push(w);
    }
    out
}

fn top1(model: &mut ModelGraph<f32>, eval: Option<&PatchSet>) -> Result<Option<f64>> {
    eval.map(|e| evaluate(model, e).map(|m| m.top1)).transpose().map_err(Into::into)
}

fn widths(spec: &ArchSpec) -> [usize; 3] {
    [spec.filters[0], spec.filters[1], spec.hidden]
}

fn run_stage(
    model: &mut ModelGraph<f32>,
    name: String,
    epochs: usize,
    run: &PruneRun,
    cfg: &FinetuneConfig,
    rng: &mut RngState,
    stages: &mut Vec<StageRecord>,
) -> Result<()> {
    let top1_pruned = top1(model, run.eval)?;
    let tc = cfg.train.clone().with_epochs(epochs);
    let hist = train(model, run.train, &tc, rng)?;
    let acc = top1(model, run.eval)?;
    log::info!("stage {name}: widths {:?}, top1 {acc:?}", widths(&model.spec));
    if let Some(dir) = run.checkpoint_dir {
        let path = dir.join(format!("stage{}_{name}.ckpt", stages.len() + 1));
        save_checkpoint(model, &CheckpointMeta::default(), &path)?;
    }
    stages.push(StageRecord {
        name,
        widths: widths(&model.spec),
        params: count_params(model).total,
        top1_pruned,
        top1: acc,
        epochs: hist.epochs.len(),
        final_loss: hist.last_loss(),
    });
    Ok(())
}

/// Prunes `model` to `target` with the given schedule and retrains.
pub fn finetune(
    model: &ModelGraph<f32>,
    ranker: &mut dyn Ranker,
    target: &PruneTarget,
    strategy: Strategy,
    run: &PruneRun,
    cfg: &FinetuneConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, PruneReport)> {
    target.check(&model.spec)?;
    let mut m = model.clone();
    let params_before = count_params(&m).total;
    let top1_before = top1(&mut m, run.eval)?;
    let mut stages = Vec::new();
    match strategy {
        Strategy::I => {
            let r = ranker.rank(&mut m)?;
            m = apply_prune(&m, &r, target)?;
            run_stage(&mut m, "all".into(), cfg.epochs_one_shot, run, cfg, rng, &mut stages)?;
        }
        Strategy::II => {
            for layer in PrunableLayer::ALL {
                let r = ranker.rank(&mut m)?;
                let keep = r
                    .get(layer)
                    .ok_or_else(|| PruneError::Ranking(format!("{layer} is not ranked")))?
                    .keep(target.width(layer));
                m = prune_layer(&m, layer, &keep)?;
                run_stage(&mut m, layer.name().into(), cfg.epochs_per_layer, run, cfg, rng, &mut stages)?;
            }
        }
        Strategy::III => {
            let plan = iterative_widths(widths(&m.spec), target.widths, cfg.passes);
            for (j, w) in plan.into_iter().enumerate() {
                let r = ranker.rank(&mut m)?;
                m = apply_prune(&m, &r, &PruneTarget::new(w))?;
                run_stage(&mut m, format!("pass{}", j + 1), cfg.epochs_per_pass, run, cfg, rng, &mut stages)?;
            }
        }
    }
    let report = PruneReport {
        method: ranker.method().to_string(),
        strategy,
        ratio_label: target.label_string(),
        exact_reduction: target.exact_reduction(&model.spec)?,
        params_before,
        params_after: count_params(&m).total,
        top1_before,
        fc_criterion: ranker.fc_criterion().to_string(),
        stages,
    };
    Ok((m, report))
}

/// The pruned architecture trained from random initialization.
pub fn train_scratch(
    spec: &ArchSpec,
    target: &PruneTarget,
    data: &PatchSet,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelGraph<f32>, hsib_models::History)> {
    target.check(spec)?;
    let mut m = ModelGraph::build(&target.apply_to(spec), rng)?;
    let h = train(&mut m, data, cfg, rng)?;
    Ok((m, h))
}
