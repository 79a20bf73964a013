use serde::{Deserialize, Serialize};

use crate::cube::{HsiCube, LabelRaster};
use crate::error::{invalid, DataError, Result};

/// Bands whose spread falls below this are treated as constant.
pub const MIN_STD: f64 = 1e-8;

/// Per-band mean and population standard deviation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub fitted: bool,
}

impl Standardizer {
    /// Fits on every pixel, or only on labeled ones when `labels` is given.
    pub fn fit(cube: &HsiCube, labels: Option<&LabelRaster>) -> Result<Self> {
        let pixels: Vec<usize> = match labels {
            Some(l) => {
                if l.height() != cube.height() || l.width() != cube.width() {
                    return Err(invalid("standardizer", "label raster does not match cube"));
                }
                l.labeled()
            }
            None => (0..cube.pixels()).collect(),
        };
        Self::fit_pixels(cube, &pixels)
    }

    pub fn fit_pixels(cube: &HsiCube, pixels: &[usize]) -> Result<Self> {
        if pixels.is_empty() {
            return Err(invalid("standardizer", "no pixels to fit"));
        }
        let n = pixels.len() as f64;
        let mut mean = Vec::with_capacity(cube.bands());
        let mut std = Vec::with_capacity(cube.bands());
        for b in 0..cube.bands() {
            let band = cube.band(b);
            let m = pixels.iter().map(|&p| band[p] as f64).sum::<f64>() / n;
            let v = pixels.iter().map(|&p| (band[p] as f64 - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(v.sqrt());
        }
        Ok(Self {
            mean,
            std,
            fitted: true,
        })
    }

    pub fn apply(&self, cube: &HsiCube) -> Result<HsiCube> {
        if !self.fitted {
            return Err(DataError::NotFitted);
        }
        if self.mean.len() != cube.bands() {
            return Err(invalid(
                "standardizer",
                format!("fitted on {} bands, cube has {}", self.mean.len(), cube.bands()),
            ));
        }
        let mut out = cube.clone();
        for b in 0..cube.bands() {
            let (m, s) = (self.mean[b], self.std[b]);
            for v in out.band_mut(b) {
                *v = if s < MIN_STD {
                    0.0
                } else {
                    ((*v as f64 - m) / s) as f32
                };
            }
        }
        Ok(out)
    }
}
