use serde::{Deserialize, Serialize};

use crate::error::{invalid, DataError, Result};

/// Band-sequential `[B, H, W]` reflectance cube.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(invalid("cube", format!("empty dimension {bands}x{height}x{width}")));
        }
        if data.len() != bands * height * width {
            return Err(DataError::ByteLength {
                what: "cube samples",
                expected: 4 * (bands * height * width) as u64,
                actual: 4 * data.len() as u64,
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let plane = height * width;
            return Err(DataError::NonFinite {
                band: i / plane,
                row: (i % plane) / width,
                col: i % width,
            });
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let p = self.pixels();
        &self.data[b * p..(b + 1) * p]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        let p = self.pixels();
        &mut self.data[b * p..(b + 1) * p]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    /// Spectrum of the pixel at flat index `row * W + col`.
    pub fn spectrum(&self, pixel: usize) -> Vec<f32> {
        let p = self.pixels();
        (0..self.bands).map(|b| self.data[b * p + pixel]).collect()
    }

    /// Row-major `[pixels.len(), B]` matrix of the selected spectra.
    pub fn pixel_matrix(&self, pixels: &[usize]) -> Vec<f64> {
        let p = self.pixels();
        let mut out = Vec::with_capacity(pixels.len() * self.bands);
        for &px in pixels {
            out.extend((0..self.bands).map(|b| self.data[b * p + px] as f64));
        }
        out
    }
}

/// `H x W` class ids; 0 marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    classes: u16,
    data: Vec<u16>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, classes: u16, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(DataError::ByteLength {
                what: "labels",
                expected: 2 * (height * width) as u64,
                actual: 2 * data.len() as u64,
            });
        }
        if let Some(&bad) = data.iter().find(|&&v| v > classes) {
            return Err(invalid("labels", format!("class id {bad} exceeds {classes} classes")));
        }
        if data.iter().all(|&v| v == 0) {
            return Err(invalid("labels", "no labeled pixels"));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> u16 {
        self.classes
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Flat indices of labeled pixels in row-major order.
    pub fn labeled(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i] != 0).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Labeled pixel count per class id `1..=classes` (index 0 is class 1).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes as usize];
        for &v in &self.data {
            if v != 0 {
                c[v as usize - 1] += 1;
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum SplitCode {
    Ignore = 0,
    Train = 1,
    Test = 2,
}

/// `H x W` train/test assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SplitMask {
    pub fn new(labels: &LabelRaster, data: Vec<u8>) -> Result<Self> {
        if data.len() != labels.data.len() {
            return Err(DataError::ByteLength {
                what: "mask",
                expected: labels.data.len() as u64,
                actual: data.len() as u64,
            });
        }
        for (i, (&m, &l)) in data.iter().zip(&labels.data).enumerate() {
            if m > 2 {
                return Err(invalid("mask", format!("code {m} at pixel {i}")));
            }
            if m != 0 && l == 0 {
                return Err(invalid("mask", format!("pixel {i} is assigned but unlabeled")));
            }
        }
        Ok(Self {
            height: labels.height,
            width: labels.width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixels_with(&self, code: SplitCode) -> Vec<usize> {
        let c = code as u8;
        (0..self.data.len()).filter(|&i| self.data[i] == c).collect()
    }
}

/// A scene with its ground truth and optional predefined split.
#[derive(Debug, Clone)]
pub struct HsiDataset {
    pub name: String,
    pub cube: HsiCube,
    pub labels: LabelRaster,
    pub mask: Option<SplitMask>,
    pub class_names: Vec<String>,
}

impl HsiDataset {
    pub fn new(
        name: impl Into<String>,
        cube: HsiCube,
        labels: LabelRaster,
        mask: Option<SplitMask>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if cube.height != labels.height || cube.width != labels.width {
            return Err(invalid(
                "dataset",
                format!(
                    "cube is {}x{} but labels are {}x{}",
                    cube.height, cube.width, labels.height, labels.width
                ),
            ));
        }
        if !class_names.is_empty() && class_names.len() != labels.classes as usize {
            return Err(invalid(
                "dataset",
                format!("{} class names for {} classes", class_names.len(), labels.classes),
            ));
        }
        Ok(Self {
            name: name.into(),
            cube,
            labels,
            mask,
            class_names,
        })
    }

    pub fn classes(&self) -> usize {
        self.labels.classes as usize
    }
}
