use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Cnn1d,
    Cnn2d,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn1d => "cnn1d",
            ModelKind::Cnn2d => "cnn2d",
        })
    }
}

/// Shape of one of the three classifiers.
///
/// `filters` and `kernels` are unused by the MLP; `patch` is 1 for the
/// spectral models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub filters: [usize; 2],
    pub kernels: [usize; 2],
    pub hidden: usize,
    pub classes: usize,
    pub patch: usize,
}

pub const POOL: usize = 2;

impl ArchSpec {
    /// Two 5x5 conv layers (50, 100 filters), 2x2 max pool, FC 100, on
    /// 40-channel 19x19 patches.
    pub fn cnn2d(classes: usize) -> Self {
        Self {
            kind: ModelKind::Cnn2d,
            in_channels: 40,
            filters: [50, 100],
            kernels: [5, 5],
            hidden: 100,
            classes,
            patch: 19,
        }
    }

    pub fn cnn2d_widths(classes: usize, f1: usize, f2: usize, hidden: usize) -> Self {
        Self {
            filters: [f1, f2],
            hidden,
            ..Self::cnn2d(classes)
        }
    }

    pub fn mlp(in_channels: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            in_channels,
            filters: [0, 0],
            kernels: [0, 0],
            hidden: 256,
            classes,
            patch: 1,
        }
    }

    pub fn cnn1d(in_channels: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Cnn1d,
            in_channels,
            filters: [20, 40],
            kernels: [11, 5],
            hidden: 100,
            classes,
            patch: 1,
        }
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    /// Extent left after the last pooling stage. CNN2D pools once after
    /// conv2; CNN1D pools after each conv.
    pub fn pooled_extent(&self) -> Result<usize> {
        fn conv(len: usize, k: usize) -> Result<usize> {
            if k == 0 || k > len {
                return Err(ModelError::Spec(format!("kernel {k} does not fit extent {len}")));
            }
            Ok(len - k + 1)
        }
        fn pool(len: usize) -> Result<usize> {
            if len < POOL {
                return Err(ModelError::Spec(format!("extent {len} too small to pool")));
            }
            Ok(len / POOL)
        }
        let [k1, k2] = self.kernels;
        match self.kind {
            ModelKind::Mlp => Ok(1),
            ModelKind::Cnn2d => pool(conv(conv(self.patch, k1)?, k2)?),
            ModelKind::Cnn1d => pool(conv(pool(conv(self.in_channels, k1)?)?, k2)?),
        }
    }

    /// Inputs to the first fully connected layer.
    pub fn flatten_len(&self) -> Result<usize> {
        Ok(match self.kind {
            ModelKind::Mlp => self.in_channels,
            ModelKind::Cnn1d => self.filters[1] * self.pooled_extent()?,
            ModelKind::Cnn2d => {
                let p = self.pooled_extent()?;
                self.filters[1] * p * p
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(ModelError::Spec(format!("zero width in {self:?}")));
        }
        if self.kind != ModelKind::Mlp {
            if self.filters.contains(&0) || self.kernels.contains(&0) {
                return Err(ModelError::Spec(format!("zero filter or kernel in {self:?}")));
            }
            if self.kind == ModelKind::Cnn2d && self.patch % 2 == 0 {
                return Err(ModelError::Spec(format!("patch size {} is even", self.patch)));
            }
            self.pooled_extent()?;
        }
        Ok(())
    }

    /// Weights plus biases of every conv and FC layer, by layer name.
    pub fn layer_params(&self) -> Result<Vec<(String, usize)>> {
        self.validate()?;
        let mut out = Vec::new();
        let [f1, f2] = self.filters;
        let [k1, k2] = self.kernels;
        match self.kind {
            ModelKind::Mlp => {}
            ModelKind::Cnn1d => {
                out.push(("conv1".into(), f1 * k1 + f1));
                out.push(("conv2".into(), f2 * f1 * k2 + f2));
            }
            ModelKind::Cnn2d => {
                out.push(("conv1".into(), f1 * self.in_channels * k1 * k1 + f1));
                out.push(("conv2".into(), f2 * f1 * k2 * k2 + f2));
            }
        }
        let flat = self.flatten_len()?;
        out.push(("fc1".into(), flat * self.hidden + self.hidden));
        out.push(("fc2".into(), self.hidden * self.classes + self.classes));
        Ok(out)
    }

    /// BatchNorm scale and shift parameters (CNN2D only).
    pub fn bn_params(&self) -> usize {
        match self.kind {
            ModelKind::Cnn2d => 2 * (self.filters[0] + self.filters[1]),
            _ => 0,
        }
    }

    pub fn total_params(&self) -> Result<usize> {
        Ok(self.layer_params()?.iter().map(|(_, n)| n).sum())
    }
}
