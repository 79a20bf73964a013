//! Train/test assignment of labeled pixels.

use hsib_tensor::RngState;

use crate::cube::{LabelRaster, SplitCode, SplitMask};
use crate::error::{invalid, DataError, Result};

/// `round(fraction * n)` with halves rounded up, at least 1 and leaving at
/// least one pixel for test.
pub fn train_count(fraction: f64, n: usize) -> usize {
    let r = (fraction * n as f64 + 0.5 + 1e-9).floor() as usize;
    r.clamp(1, n.saturating_sub(1).max(1))
}

fn check(labels: &LabelRaster, fraction: f64) -> Result<Vec<Vec<usize>>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid("train fraction", format!("{fraction} outside (0, 1)")));
    }
    let mut per_class = vec![Vec::new(); labels.classes() as usize];
    for (i, &l) in labels.data().iter().enumerate() {
        if l != 0 {
            per_class[l as usize - 1].push(i);
        }
    }
    for (c, px) in per_class.iter().enumerate() {
        if px.len() == 1 {
            return Err(DataError::ClassTooSmall {
                class: c as u16 + 1,
                count: 1,
            });
        }
    }
    Ok(per_class)
}

fn assemble(labels: &LabelRaster, per_class: &[Vec<usize>], fraction: f64) -> Result<SplitMask> {
    let mut mask = vec![0u8; labels.data().len()];
    for px in per_class.iter().filter(|p| !p.is_empty()) {
        let k = train_count(fraction, px.len());
        for (j, &p) in px.iter().enumerate() {
            mask[p] = if j < k {
                SplitCode::Train as u8
            } else {
                SplitCode::Test as u8
            };
        }
    }
    SplitMask::new(labels, mask)
}

/// Stratified random split: each class's pixels are shuffled with a seeded
/// generator and the first `round(fraction * n_c)` go to training.
pub fn split_random(labels: &LabelRaster, fraction: f64, seed: u64) -> Result<SplitMask> {
    let mut per_class = check(labels, fraction)?;
    let mut rng = RngState::new(seed);
    for px in per_class.iter_mut() {
        rng.shuffle(px);
    }
    assemble(labels, &per_class, fraction)
}

/// Spatially contiguous split: each class's first `round(fraction * n_c)`
/// pixels in row-major order go to training.
pub fn split_disjoint(labels: &LabelRaster, fraction: f64) -> Result<SplitMask> {
    let per_class = check(labels, fraction)?;
    assemble(labels, &per_class, fraction)
}
