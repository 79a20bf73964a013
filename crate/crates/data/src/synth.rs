//! Procedural scenes for tests and offline demos.
//!
//! Classes occupy Voronoi cells around random sites; each class has a smooth
//! spectral signature, and pixels add band-correlated noise plus a slowly
//! varying illumination field so neighbouring pixels carry useful context.

use hsib_tensor::RngState;

use crate::cube::{HsiCube, HsiDataset, LabelRaster};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub name: String,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub classes: u16,
    /// Sites per class; more sites give a more fragmented map.
    pub sites_per_class: usize,
    /// Fraction of pixels left unlabeled.
    pub unlabeled: f64,
    /// Per-pixel noise relative to the spread between class signatures.
    pub noise: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn small(seed: u64) -> Self {
        Self {
            name: "synthetic".into(),
            bands: 24,
            height: 36,
            width: 36,
            classes: 4,
            sites_per_class: 3,
            unlabeled: 0.3,
            noise: 0.35,
            seed,
        }
    }
}

pub fn generate(spec: &SceneSpec) -> Result<HsiDataset> {
    let mut rng = RngState::new(spec.seed);
    let (b, h, w, k) = (spec.bands, spec.height, spec.width, spec.classes as usize);

    let signatures: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (rng.uniform(0.0, 1.0), rng.uniform(0.05, 0.3), rng.uniform(0.3, 1.0)))
                .collect();
            let base = rng.uniform(0.2, 0.6);
            (0..b)
                .map(|i| {
                    let x = i as f64 / (b.max(2) - 1) as f64;
                    base + bumps
                        .iter()
                        .map(|(c, s, a)| a * (-(x - c).powi(2) / (2.0 * s * s)).exp())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();

    let sites: Vec<(f64, f64, usize)> = (0..k * spec.sites_per_class.max(1))
        .map(|i| (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64), i % k))
        .collect();

    let mut labels = vec![0u16; h * w];
    let mut class_of = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut best, mut bd) = (0, f64::INFINITY);
            for (s, &(sr, sc, _)) in sites.iter().enumerate() {
                let d = (r as f64 - sr).powi(2) + (c as f64 - sc).powi(2);
                if d < bd {
                    bd = d;
                    best = s;
                }
            }
            class_of[r * w + c] = sites[best].2;
            if rng.unit() >= spec.unlabeled {
                labels[r * w + c] = sites[best].2 as u16 + 1;
            }
        }
    }
    // every class keeps at least two labeled pixels
    for cls in 0..k {
        let mut have = labels.iter().filter(|&&l| l as usize == cls + 1).count();
        for p in 0..h * w {
            if have >= 2 {
                break;
            }
            if class_of[p] == cls && labels[p] == 0 {
                labels[p] = cls as u16 + 1;
                have += 1;
            }
        }
        if have < 2 {
            let free: Vec<usize> = (0..h * w).filter(|&p| labels[p] == 0).take(2 - have).collect();
            for p in free {
                labels[p] = cls as u16 + 1;
                class_of[p] = cls;
            }
        }
    }

    let (fr, fc) = (rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0));
    let mut data = vec![0.0f32; b * h * w];
    for p in 0..h * w {
        let (r, c) = (p / w, p % w);
        let illum = 1.0 + 0.15 * ((r as f64 / h as f64) * fr * std::f64::consts::TAU).sin() * ((c as f64 / w as f64) * fc * std::f64::consts::TAU).cos();
        let sig = &signatures[class_of[p]];
        let mut e = 0.0;
        for band in 0..b {
            // AR(1) noise along the spectrum
            e = 0.7 * e + spec.noise * rng.normal();
            data[band * h * w + p] = (100.0 * (sig[band] * illum + 0.3 * e)) as f32;
        }
    }
    let cube = HsiCube::new(b, h, w, data)?;
    let labels = LabelRaster::new(h, w, spec.classes, labels)?;
    let names = (1..=k).map(|i| format!("class-{i}")).collect();
    HsiDataset::new(spec.name.clone(), cube, labels, None, names)
}
