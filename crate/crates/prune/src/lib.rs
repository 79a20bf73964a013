//! Filter-level structured pruning of the conv classifiers.
//!
//! Rankers score conv1/conv2 filters and fc1 neurons; [`apply_prune`] removes
//! the losers together with every weight that reads them; [`finetune`] runs
//! one of three prune-and-retrain schedules.

pub mod error;
pub mod finetune;
pub mod ranking;
pub mod sfp;
pub mod slimming;
pub mod surgery;
pub mod target;
pub mod thinet;

pub use error::{PruneError, Result};
pub use finetune::{
    finetune, iterative_widths, train_scratch, FinetuneConfig, L1Ranker, PruneReport, PruneRun, Ranker, SfpRanker,
    SlimmingRanker, StageRecord, Strategy, ThinetRanker,
};
pub use ranking::{filter_l1, filter_l2, rank_l1, row_l1, FilterRanking, LayerRanking};
pub use sfp::{sfp_train, zero_filters, SfpEpoch, SfpOutcome};
pub use slimming::{bn_scales, rank_slimming, train_slimming};
pub use surgery::{apply_prune, prune_layer};
pub use target::{PrunableLayer, PruneTarget, RATIO_ROWS};
pub use thinet::{greedy_keep, greedy_removal, rank_thinet, ContributionGram, ThinetConfig, MIN_CALIBRATION};
