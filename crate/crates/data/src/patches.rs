//! Pixel-centred patches, extracted on demand from a reflect-padded cube.
//!
//! Materializing every 40x19x19 patch of a large scene costs gigabytes, so a
//! [`PatchSet`] keeps the padded cube and the pixel coordinates and copies a
//! patch out only when a batch asks for it.

use std::sync::Arc;

use crate::cube::{HsiCube, LabelRaster, SplitCode, SplitMask};
use crate::error::{invalid, Result};

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

#[derive(Debug)]
struct Padded {
    channels: usize,
    height: usize,
    width: usize,
    pad: usize,
    data: Vec<f32>,
}

impl Padded {
    fn new(cube: &HsiCube, pad: usize) -> Self {
        let (h, w) = (cube.height(), cube.width());
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut data = Vec::with_capacity(cube.bands() * ph * pw);
        for b in 0..cube.bands() {
            let band = cube.band(b);
            for r in 0..ph {
                let sr = reflect(r as isize - pad as isize, h);
                for c in 0..pw {
                    let sc = reflect(c as isize - pad as isize, w);
                    data.push(band[sr * w + sc]);
                }
            }
        }
        Self {
            channels: cube.bands(),
            height: ph,
            width: pw,
            pad,
            data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchSet {
    padded: Arc<Padded>,
    d: usize,
    coords: Vec<(usize, usize)>,
    labels: Vec<usize>,
    classes: usize,
}

impl PatchSet {
    pub fn channels(&self) -> usize {
        self.padded.channels
    }

    pub fn patch_size(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Zero-based labels.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(row, col)` of each patch centre in the source scene.
    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    /// Values per patch, `C * d * d`.
    pub fn patch_len(&self) -> usize {
        self.channels() * self.d * self.d
    }

    /// Copies patch `i` into `out` as `[C, d, d]`.
    pub fn write_patch(&self, i: usize, out: &mut [f32]) {
        let p = &*self.padded;
        let (r, c) = self.coords[i];
        let d = self.d;
        // padded coordinates of the top-left corner
        let (r0, c0) = (r + p.pad - d / 2, c + p.pad - d / 2);
        for ch in 0..p.channels {
            for y in 0..d {
                let src = (ch * p.height + r0 + y) * p.width + c0;
                let dst = (ch * d + y) * d;
                out[dst..dst + d].copy_from_slice(&p.data[src..src + d]);
            }
        }
    }

    pub fn patch(&self, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.patch_len()];
        self.write_patch(i, &mut v);
        v
    }

    /// Centre spectrum of patch `i`, `[C]`.
    pub fn spectrum(&self, i: usize) -> Vec<f32> {
        let p = &*self.padded;
        let (r, c) = self.coords[i];
        (0..p.channels)
            .map(|ch| p.data[(ch * p.height + r + p.pad) * p.width + c + p.pad])
            .collect()
    }

    /// Stacks the selected patches into a flat `[n, C, d, d]` buffer.
    pub fn batch(&self, indices: &[usize]) -> Vec<f32> {
        let len = self.patch_len();
        let mut out = vec![0.0; indices.len() * len];
        for (k, &i) in indices.iter().enumerate() {
            self.write_patch(i, &mut out[k * len..(k + 1) * len]);
        }
        out
    }

    /// Stacks centre spectra into `[n, C]`.
    pub fn spectra(&self, indices: &[usize]) -> Vec<f32> {
        indices.iter().flat_map(|&i| self.spectrum(i)).collect()
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Patches at the given positions; shares the padded cube.
    pub fn subset(&self, indices: &[usize]) -> PatchSet {
        PatchSet {
            padded: Arc::clone(&self.padded),
            d: self.d,
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Splits into (train, test) according to `mask`.
    pub fn split(&self, mask: &SplitMask) -> (PatchSet, PatchSet) {
        let w = mask.width();
        let code = |i: usize| {
            let (r, c) = self.coords[i];
            mask.data()[r * w + c]
        };
        let train: Vec<usize> = (0..self.len()).filter(|&i| code(i) == SplitCode::Train as u8).collect();
        let test: Vec<usize> = (0..self.len()).filter(|&i| code(i) == SplitCode::Test as u8).collect();
        (self.subset(&train), self.subset(&test))
    }
}

/// One `d x d` patch per labeled pixel, in row-major pixel order. Class ids
/// `1..=C` become labels `0..C`.
pub fn extract_patches(cube: &HsiCube, labels: &LabelRaster, d: usize) -> Result<PatchSet> {
    if d % 2 == 0 {
        return Err(invalid("patch size", format!("{d} is even")));
    }
    if labels.height() != cube.height() || labels.width() != cube.width() {
        return Err(invalid("patches", "label raster does not match cube"));
    }
    let w = cube.width();
    let px = labels.labeled();
    let coords = px.iter().map(|&p| (p / w, p % w)).collect();
    let lab = px.iter().map(|&p| labels.data()[p] as usize - 1).collect();
    Ok(PatchSet {
        padded: Arc::new(Padded::new(cube, d / 2)),
        d,
        coords,
        labels: lab,
        classes: labels.classes() as usize,
    })
}
