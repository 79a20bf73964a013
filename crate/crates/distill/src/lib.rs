//! Knowledge distillation into compact hyperspectral classifiers.
//!
//! Fourteen methods in three families:
//!
//! - offline, from frozen pretrained teachers: soft targets, FitNets, AT,
//!   CC, SimKD, CA-MKD;
//! - online, where peers or branches teach each other during training:
//!   DML, ONE, CL-ILR, OKDDip;
//! - self, with no external teacher: TF-KD, CS-KD, PS-KD, DDGSD.
//!
//! [`distill`] runs any of them and returns a plain [`hsib_models::ModelGraph`]
//! ready for evaluation or further compression.

pub mod config;
pub mod error;
pub mod losses;
pub mod multibranch;
pub mod outcome;
pub mod teacher;
pub mod trainers;

pub use config::{check_tfkd_a, DistillConfig, Family, Method};
pub use error::{DistillError, Result};
pub use losses::LossParts;
pub use multibranch::{BranchOutputs, MultiBranch};
pub use outcome::save_outcome;
pub use teacher::TeacherBundle;
pub use trainers::{
    distill, draw_partners, flip_views, fold_projector, hint_epochs, pskd_alpha, DistillData, DistillOutcome,
    DDGSD_TEMPERATURE, DML_TEMPERATURE,
};
