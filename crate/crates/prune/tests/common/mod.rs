#![allow(dead_code)]

use hsib_data::synth::{generate, SceneSpec};
use hsib_data::{preprocess, split_random, PatchSet, PreprocessConfig};
use hsib_models::{ArchSpec, ModelKind};

/// Narrow CNN2D over 6-channel 9x9 patches: conv 3x3 twice, pool to 2x2.
pub fn small_spec(classes: usize) -> ArchSpec {
    ArchSpec {
        kind: ModelKind::Cnn2d,
        in_channels: 6,
        filters: [8, 12],
        kernels: [3, 3],
        hidden: 16,
        classes,
        patch: 9,
    }
}

/// Synthetic 4-class scene split in half.
pub fn scene(seed: u64) -> (PatchSet, PatchSet) {
    let ds = generate(&SceneSpec::small(seed)).unwrap();
    let cfg = PreprocessConfig {
        pca_components: Some(6),
        patch_size: 9,
        ..PreprocessConfig::default()
    };
    let prepared = preprocess(&ds, &cfg, None).unwrap();
    let mask = split_random(&ds.labels, 0.5, seed).unwrap();
    prepared.patches.split(&mask)
}
