//! Method ids and hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DistillError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SoftTargets,
    FitNets,
    At,
    Cc,
    SimKd,
    CaMkd,
    Dml,
    One,
    ClIlr,
    OkdDip,
    TfKd,
    CsKd,
    PsKd,
    Ddgsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Offline,
    Online,
    #[serde(rename = "self")]
    SelfKd,
}

impl Family {
    pub fn title(&self) -> &'static str {
        match self {
            Family::Offline => "Offline",
            Family::Online => "Online",
            Family::SelfKd => "Self",
        }
    }
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::SoftTargets,
        Method::FitNets,
        Method::At,
        Method::Cc,
        Method::SimKd,
        Method::CaMkd,
        Method::Dml,
        Method::One,
        Method::ClIlr,
        Method::OkdDip,
        Method::TfKd,
        Method::CsKd,
        Method::PsKd,
        Method::Ddgsd,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Method::SoftTargets => "soft_targets",
            Method::FitNets => "fitnets",
            Method::At => "at",
            Method::Cc => "cc",
            Method::SimKd => "simkd",
            Method::CaMkd => "camkd",
            Method::Dml => "dml",
            Method::One => "one",
            Method::ClIlr => "clilr",
            Method::OkdDip => "okddip",
            Method::TfKd => "tfkd",
            Method::CsKd => "cskd",
            Method::PsKd => "pskd",
            Method::Ddgsd => "ddgsd",
        }
    }

    /// Name as printed in result tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            Method::SoftTargets => "Soft targets",
            Method::FitNets => "FitNets",
            Method::At => "AT",
            Method::Cc => "CC",
            Method::SimKd => "SimKD",
            Method::CaMkd => "CA-MKD",
            Method::Dml => "DML",
            Method::One => "ONE",
            Method::ClIlr => "CL-ILR",
            Method::OkdDip => "OKDDip",
            Method::TfKd => "TF-KD",
            Method::CsKd => "CS-KD",
            Method::PsKd => "PS-KD",
            Method::Ddgsd => "DDGSD",
        }
    }

    pub fn family(&self) -> Family {
        use Method::*;
        match self {
            SoftTargets | FitNets | At | Cc | SimKd | CaMkd => Family::Offline,
            Dml | One | ClIlr | OkdDip => Family::Online,
            TfKd | CsKd | PsKd | Ddgsd => Family::SelfKd,
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.family() == Family::Offline
    }

    /// Teachers required by an offline method.
    pub fn teachers_needed(&self) -> usize {
        match self {
            Method::CaMkd => 2,
            m if m.needs_teacher() => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Method {
    type Err = DistillError;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.id().replace('_', "") == key)
            .ok_or_else(|| DistillError::Config(format!("unknown distillation method {s:?}")))
    }
}

fn d_temperature() -> f64 {
    4.0
}
fn d_alpha() -> f64 {
    0.1
}
fn d_lambda_cc() -> f64 {
    0.02
}
fn d_one() -> f64 {
    1.0
}
fn d_tfkd_a() -> f64 {
    0.9
}
fn d_tfkd_beta() -> f64 {
    0.1
}
fn d_tfkd_t() -> f64 {
    20.0
}
fn d_pskd() -> f64 {
    0.8
}
fn d_peers() -> usize {
    3
}
fn d_attn() -> usize {
    16
}

/// Resolved hyperparameters. Every field has a default so a config may
/// name only the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: Method,
    /// Softmax temperature for the response terms.
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    /// Weight of the hard-label CE in soft-target style losses; the
    /// distillation term gets `1 - alpha`.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Attention transfer weight.
    #[serde(default = "d_one")]
    pub beta_at: f64,
    /// CC weight per `b^2`; the effective weight is `lambda_cc * b^2`.
    #[serde(default = "d_lambda_cc")]
    pub lambda_cc: f64,
    /// RBF bandwidth on L2-normalized embeddings.
    #[serde(default = "d_one")]
    pub rbf_delta: f64,
    /// Feature term weight (CA-MKD, DDGSD).
    #[serde(default = "d_one")]
    pub lambda_f: f64,
    /// Prediction consistency weight (DDGSD).
    #[serde(default = "d_one")]
    pub lambda_p: f64,
    /// CS-KD regularizer weight.
    #[serde(default = "d_one")]
    pub lambda_cs: f64,
    /// TF-KD probability of the correct class.
    #[serde(default = "d_tfkd_a")]
    pub tfkd_a: f64,
    #[serde(default = "d_tfkd_beta")]
    pub tfkd_beta: f64,
    #[serde(default = "d_tfkd_t")]
    pub tfkd_temperature: f64,
    /// Final PS-KD mixing weight, reached at the last epoch.
    #[serde(default = "d_pskd")]
    pub pskd_alpha_t: f64,
    /// Peers / branches for online methods (OKDDip: leader included).
    #[serde(default = "d_peers")]
    pub peers: usize,
    /// Query/key width of the OKDDip attention.
    #[serde(default = "d_attn")]
    pub attn_dim: usize,
    /// FitNets hint stage length; `None` means a quarter of the epochs.
    #[serde(default)]
    pub hint_epochs: Option<usize>,
}

impl DistillConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            temperature: d_temperature(),
            alpha: d_alpha(),
            beta_at: d_one(),
            lambda_cc: d_lambda_cc(),
            rbf_delta: d_one(),
            lambda_f: d_one(),
            lambda_p: d_one(),
            lambda_cs: d_one(),
            tfkd_a: d_tfkd_a(),
            tfkd_beta: d_tfkd_beta(),
            tfkd_temperature: d_tfkd_t(),
            pskd_alpha_t: d_pskd(),
            peers: d_peers(),
            attn_dim: d_attn(),
            hint_epochs: None,
        }
    }

    /// Checks ranges; `classes` is needed for the TF-KD bound `a > 1/K`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let err = |m: String| Err(DistillError::Config(m));
        for (name, t) in [("temperature", self.temperature), ("tfkd_temperature", self.tfkd_temperature)] {
            if !(t > 0.0 && t.is_finite()) {
                return err(format!("{name} must be > 0, got {t}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return err(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.pskd_alpha_t) {
            return err(format!("pskd_alpha_t must be in [0, 1], got {}", self.pskd_alpha_t));
        }
        check_tfkd_a(self.tfkd_a, classes)?;
        if !(self.rbf_delta > 0.0) {
            return err(format!("rbf_delta must be > 0, got {}", self.rbf_delta));
        }
        for (name, v) in [
            ("beta_at", self.beta_at),
            ("lambda_cc", self.lambda_cc),
            ("lambda_f", self.lambda_f),
            ("lambda_p", self.lambda_p),
            ("lambda_cs", self.lambda_cs),
            ("tfkd_beta", self.tfkd_beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.attn_dim == 0 {
            return err("attn_dim must be >= 1".into());
        }
        Ok(())
    }
}

pub fn check_tfkd_a(a: f64, classes: usize) -> Result<()> {
    if classes < 2 || !(a > 1.0 / classes as f64 && a <= 1.0) {
        return Err(DistillError::Config(format!(
            "tfkd_a must be in (1/{classes}, 1], got {a}"
        )));
    }
    Ok(())
}
