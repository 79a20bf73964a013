//! Hyperspectral scenes: container I/O, cleaning, standardization, PCA,
//! patch extraction and train/test splitting.

pub mod clean;
pub mod container;
pub mod cube;
pub mod error;
pub mod patches;
pub mod pca;
pub mod pipeline;
pub mod split;
pub mod standardize;
pub mod synth;

pub use clean::{clean_indian_pines, indian_pines_water_bands, remove_bands, zero_bands};
pub use container::{load_cube, load_named, save};
pub use cube::{HsiCube, HsiDataset, LabelRaster, SplitCode, SplitMask};
pub use error::{DataError, Result};
pub use patches::{extract_patches, PatchSet};
pub use pca::{jacobi_eigen, PcaModel};
pub use pipeline::{preprocess, FitPopulation, PreprocessConfig, Prepared};
pub use split::{split_disjoint, split_random, train_count};
pub use standardize::Standardizer;

/// Environment variable naming the directory that holds converted scenes.
pub const DATA_DIR_ENV: &str = "HSIB_DATA_DIR";
