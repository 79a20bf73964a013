//! Range observers for activations.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::qparams::{compute_qparams, QParams};

/// How a running range reacts to a new batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObserverRule {
    /// Running min and max over everything seen.
    MinMax,
    /// `r <- d * r + (1 - d) * batch` for both ends, after a first batch
    /// that sets the range directly.
    Ema(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observer {
    pub name: String,
    pub rule: ObserverRule,
    /// Unsigned observers follow a ReLU.
    pub signed: bool,
    min: f64,
    max: f64,
    batches: usize,
}

impl Observer {
    pub fn new(name: impl Into<String>, rule: ObserverRule, signed: bool) -> Self {
        Self {
            name: name.into(),
            rule,
            signed,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            batches: 0,
        }
    }

    pub fn update(&mut self, xs: &[f32]) {
        if xs.is_empty() {
            return;
        }
        let (lo, hi) = xs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
        match self.rule {
            ObserverRule::MinMax => {
                self.min = self.min.min(lo);
                self.max = self.max.max(hi);
            }
            ObserverRule::Ema(d) if self.batches > 0 => {
                self.min = d * self.min + (1.0 - d) * lo;
                self.max = d * self.max + (1.0 - d) * hi;
            }
            ObserverRule::Ema(_) => {
                self.min = lo;
                self.max = hi;
            }
        }
        self.batches += 1;
    }

    /// Continues from another observer's range under a different rule.
    pub fn seeded(&self, rule: ObserverRule) -> Self {
        Self { rule, ..self.clone() }
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        (self.batches > 0).then_some((self.min, self.max))
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn qparams(&self, bits: u32) -> Result<QParams> {
        let (lo, hi) = self.range().ok_or_else(|| QuantError::Unobserved(self.name.clone()))?;
        compute_qparams(lo, hi, bits, self.signed)
    }
}
