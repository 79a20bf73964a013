//! Clean, standardize, reduce and cut patches in one call.

use serde::{Deserialize, Serialize};

use crate::clean::remove_bands;
use crate::cube::{HsiCube, HsiDataset, SplitCode, SplitMask};
use crate::error::Result;
use crate::patches::{extract_patches, PatchSet};
use crate::pca::PcaModel;
use crate::standardize::Standardizer;

/// Pixels used to fit the standardizer and PCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitPopulation {
    #[default]
    Labeled,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Zero-based bands to drop before anything else.
    #[serde(default)]
    pub remove_bands: Vec<usize>,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Number of principal components to keep; `None` keeps all bands.
    pub pca_components: Option<usize>,
    pub patch_size: usize,
    #[serde(default)]
    pub fit_on: FitPopulation,
}

fn yes() -> bool {
    true
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            remove_bands: Vec::new(),
            standardize: true,
            pca_components: Some(40),
            patch_size: 19,
            fit_on: FitPopulation::Labeled,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub cube: HsiCube,
    pub patches: PatchSet,
    pub standardizer: Option<Standardizer>,
    pub pca: Option<PcaModel>,
}

/// Runs the preprocessing chain. `mask` is only consulted when fitting on
/// training pixels.
pub fn preprocess(ds: &HsiDataset, cfg: &PreprocessConfig, mask: Option<&SplitMask>) -> Result<Prepared> {
    let mut cube = if cfg.remove_bands.is_empty() {
        ds.cube.clone()
    } else {
        remove_bands(&ds.cube, &cfg.remove_bands)?
    };
    let fit_px = match (cfg.fit_on, mask) {
        (FitPopulation::Train, Some(m)) => m.pixels_with(SplitCode::Train),
        _ => ds.labels.labeled(),
    };
    let standardizer = if cfg.standardize {
        let s = Standardizer::fit_pixels(&cube, &fit_px)?;
        cube = s.apply(&cube)?;
        Some(s)
    } else {
        None
    };
    let pca = match cfg.pca_components {
        Some(k) => {
            let m = PcaModel::fit_cube(&cube, &fit_px, k)?;
            cube = m.transform(&cube, k)?;
            Some(m)
        }
        None => None,
    };
    let patches = extract_patches(&cube, &ds.labels, cfg.patch_size)?;
    Ok(Prepared {
        cube,
        patches,
        standardizer,
        pca,
    })
}
