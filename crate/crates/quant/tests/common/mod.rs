#![allow(dead_code)]

use hsib_data::synth::{generate, SceneSpec};
use hsib_data::{preprocess, split_random, PatchSet, PreprocessConfig};
use hsib_models::{train, ArchSpec, ModelGraph, ModelKind, TrainConfig};
use hsib_tensor::RngState;

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

/// Synthetic scene with `side x side` pixels, split in half.
pub fn scene_sized(seed: u64, side: usize) -> (PatchSet, PatchSet) {
    let ds = generate(&SceneSpec {
        height: side,
        width: side,
        unlabeled: 0.2,
        ..SceneSpec::small(seed)
    })
    .unwrap();
    let cfg = PreprocessConfig {
        pca_components: Some(6),
        patch_size: 9,
        ..PreprocessConfig::default()
    };
    let prepared = preprocess(&ds, &cfg, None).unwrap();
    let mask = split_random(&ds.labels, 0.5, seed).unwrap();
    prepared.patches.split(&mask)
}

pub fn scene(seed: u64) -> (PatchSet, PatchSet) {
    scene_sized(seed, 36)
}

pub fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 3e-3,
        patience: None,
        ..TrainConfig::default()
    }
}

/// A briefly trained small CNN2D.
pub fn trained(train_set: &PatchSet, seed: u64, epochs: usize) -> ModelGraph<f32> {
    let spec = small_spec(train_set.classes());
    let mut m = ModelGraph::<f32>::build(&spec, &mut RngState::new(seed)).unwrap();
    train(&mut m, train_set, &quick(epochs), &mut RngState::new(seed)).unwrap();
    m.set_training(false);
    m
}
