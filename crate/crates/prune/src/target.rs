use std::fmt;

use hsib_models::ArchSpec;
use serde::{Deserialize, Serialize};

use crate::error::{PruneError, Result};

/// One of the three prunable layers of the conv models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrunableLayer {
    Conv1,
    Conv2,
    Fc1,
}

impl PrunableLayer {
    pub const ALL: [PrunableLayer; 3] = [PrunableLayer::Conv1, PrunableLayer::Conv2, PrunableLayer::Fc1];

    pub fn name(self) -> &'static str {
        match self {
            PrunableLayer::Conv1 => "conv1",
            PrunableLayer::Conv2 => "conv2",
            PrunableLayer::Fc1 => "fc1",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Current width of this layer in `spec`.
    pub fn width(self, spec: &ArchSpec) -> usize {
        match self {
            PrunableLayer::Conv1 => spec.filters[0],
            PrunableLayer::Conv2 => spec.filters[1],
            PrunableLayer::Fc1 => spec.hidden,
        }
    }
}

impl fmt::Display for PrunableLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ratio labels and their kept widths `(conv1, conv2, fc1)`.
pub const RATIO_ROWS: [(u32, [usize; 3]); 3] = [(90, [15, 30, 30]), (95, [10, 20, 20]), (98, [5, 10, 10])];

/// Kept widths after pruning, optionally tagged with a ratio label.
///
/// The label names an architecture row; the exact parameter reduction is
/// available from [`PruneTarget::exact_reduction`] and is not equal to the
/// label (the 90% row removes 88.4% of the parameters).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneTarget {
    pub label: Option<u32>,
    pub widths: [usize; 3],
}

impl PruneTarget {
    pub fn from_label(ratio: u32) -> Result<Self> {
        RATIO_ROWS
            .iter()
            .find(|(r, _)| *r == ratio)
            .map(|&(r, widths)| Self {
                label: Some(r),
                widths,
            })
            .ok_or_else(|| PruneTarget::bad(format!("no architecture row for ratio {ratio}%")))
    }

    pub fn new(widths: [usize; 3]) -> Self {
        Self { label: None, widths }
    }

    /// Keeps every filter and neuron; pruning with it is an identity.
    pub fn keep_all(spec: &ArchSpec) -> Self {
        Self::new([spec.filters[0], spec.filters[1], spec.hidden])
    }

    fn bad(msg: String) -> PruneError {
        PruneError::Target(msg)
    }

    pub fn width(&self, layer: PrunableLayer) -> usize {
        self.widths[layer.index()]
    }

    pub fn label_string(&self) -> String {
        match self.label {
            Some(r) => format!("{r}%"),
            None => format!("{}-{}-{}", self.widths[0], self.widths[1], self.widths[2]),
        }
    }

    /// Every width in `1..=current`.
    pub fn check(&self, spec: &ArchSpec) -> Result<()> {
        for l in PrunableLayer::ALL {
            let (w, cur) = (self.width(l), l.width(spec));
            if w == 0 || w > cur {
                return Err(Self::bad(format!("{l} width {w} outside 1..={cur}")));
            }
        }
        Ok(())
    }

    /// Every width strictly below the current one.
    pub fn check_strict(&self, spec: &ArchSpec) -> Result<()> {
        self.check(spec)?;
        for l in PrunableLayer::ALL {
            if self.width(l) >= l.width(spec) {
                return Err(Self::bad(format!(
                    "{l} target {} is not below the current width {}",
                    self.width(l),
                    l.width(spec)
                )));
            }
        }
        Ok(())
    }

    /// The architecture left after pruning `spec` to this target.
    pub fn apply_to(&self, spec: &ArchSpec) -> ArchSpec {
        ArchSpec {
            filters: [self.widths[0], self.widths[1]],
            hidden: self.widths[2],
            ..spec.clone()
        }
    }

    /// Fraction of conv/FC parameters removed.
    pub fn exact_reduction(&self, spec: &ArchSpec) -> Result<f64> {
        let before = spec.total_params()? as f64;
        let after = self.apply_to(spec).total_params()? as f64;
        Ok(1.0 - after / before)
    }
}
