//! ThiNet: choose the channels whose removal least disturbs the next
//! layer's pre-activations.
//!
//! Removing a set `R` of input channels changes every next-layer output by
//! `-sum_{c in R} z_c`, where `z_c` is channel `c`'s additive contribution.
//! The squared error over the calibration sample is therefore
//! `sum_{c,d in R} G[c][d]` for the Gram matrix `G` of contributions, and
//! the greedy step that adds `c` to `R` costs `G[c][c] + 2 sum_{d in R} G[c][d]`.

use hsib_data::PatchSet;
use hsib_models::{eval::batch_input, ModelGraph, ModelKind};
use hsib_tensor::{Real, RngState, Tape};

use crate::error::{PruneError, Result};
use crate::ranking::{fc1_l1, require_two_convs, FilterRanking, LayerRanking};
use crate::target::PrunableLayer;

pub const MIN_CALIBRATION: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThinetConfig {
    /// Calibration patches drawn from the training set.
    pub samples: usize,
    /// Random next-layer output positions per patch (conv layers only).
    pub positions: usize,
    pub seed: u64,
}

impl Default for ThinetConfig {
    fn default() -> Self {
        Self {
            samples: MIN_CALIBRATION,
            positions: 16,
            seed: 0,
        }
    }
}

/// Running Gram matrix of per-channel contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionGram {
    channels: usize,
    g: Vec<f64>,
    rows: usize,
}

impl ContributionGram {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            g: vec![0.0; channels * channels],
            rows: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of contribution entries folded in per channel.
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn at(&self, c: usize, d: usize) -> f64 {
        self.g[c * self.channels + d]
    }

    /// Adds `z zᵀ` for a row-major `[channels, m]` contribution block.
    pub fn add(&mut self, z: &[f64]) {
        let c = self.channels;
        assert_eq!(z.len() % c, 0, "contribution block length");
        let m = z.len() / c;
        f64::gemm(c, m, c, 1.0, z, m, 1, z, 1, m, 1.0, &mut self.g, c, 1);
        self.rows += m;
    }

    /// Squared reconstruction error after removing `removed`.
    pub fn cost(&self, removed: &[usize]) -> f64 {
        removed
            .iter()
            .flat_map(|&a| removed.iter().map(move |&b| (a, b)))
            .map(|(a, b)| self.at(a, b))
            .sum()
    }
}

/// Greedy removal sequence over all channels. Ties go to the lower index.
pub fn greedy_removal(gram: &ContributionGram) -> Vec<usize> {
    let c = gram.channels();
    let mut cross = vec![0.0; c];
    let mut removed = vec![false; c];
    let mut order = Vec::with_capacity(c);
    for _ in 0..c {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..c).filter(|&i| !removed[i]) {
            let inc = gram.at(i, i) + 2.0 * cross[i];
            if best.is_none_or(|(_, b)| inc < b) {
                best = Some((i, inc));
            }
        }
        let (i, _) = best.expect("a channel remains");
        removed[i] = true;
        order.push(i);
        for (j, x) in cross.iter_mut().enumerate() {
            *x += gram.at(i, j);
        }
    }
    order
}

/// Channels kept after greedily removing down to `keep`, ascending.
pub fn greedy_keep(gram: &ContributionGram, keep: usize) -> Vec<usize> {
    let order = greedy_removal(gram);
    let drop = gram.channels().saturating_sub(keep);
    let mut k = order[drop..].to_vec();
    k.sort_unstable();
    k
}

/// Turns a removal sequence into a ranking: the last channel removed is the
/// most important. Scores are the removal step.
fn ranking_from_removal(layer: PrunableLayer, removal: Vec<usize>) -> Result<LayerRanking> {
    let mut scores = vec![0.0; removal.len()];
    for (step, &c) in removal.iter().enumerate() {
        scores[c] = step as f64;
    }
    let order = removal.into_iter().rev().collect();
    LayerRanking::from_order(layer, scores, order)
}

struct Activations {
    /// conv1 after BN and ReLU, `[n, f1, h1, w1]`.
    conv1: Vec<f64>,
    conv1_shape: Vec<usize>,
    /// conv2 after pooling, `[n, f2 * p]`.
    pooled: Vec<f64>,
}

fn activations<T: Real>(model: &mut ModelGraph<T>, calib: &PatchSet, idx: &[usize]) -> Result<Activations> {
    let was = model.is_training();
    model.set_training(false);
    let x: Vec<T> = batch_input(model.spec.kind, calib, idx)
        .into_iter()
        .map(|v| T::lit(v as f64))
        .collect();
    let mut tape = Tape::new();
    let result = (|| {
        let xv = tape.input(model.input_shape(idx.len()), x)?;
        let f = model.forward(&mut tape, xv)?;
        Ok::<_, PruneError>(f.taps)
    })();
    model.set_training(was);
    let taps = result?;
    let c1 = taps.conv1.expect("conv model has a conv1 tap");
    let pool = taps.pool.expect("conv model pools");
    Ok(Activations {
        conv1: tape.value(c1).iter().map(|v| v.as_f64()).collect(),
        conv1_shape: tape.shape(c1).to_vec(),
        pooled: tape.value(pool).iter().map(|v| v.as_f64()).collect(),
    })
}

/// Gram of conv1 channel contributions to conv2 pre-activations, sampled
/// at random conv2 output positions.
fn conv1_gram<T: Real>(model: &ModelGraph<T>, act: &Activations, positions: usize, rng: &mut RngState) -> ContributionGram {
    let [n, c, h, w] = act.conv1_shape[..] else {
        unreachable!("2-D conv tap")
    };
    let w2: Vec<f64> = model.conv(1).weight.data().iter().map(|v| v.as_f64()).collect();
    let k = model.spec.kernels[1];
    let out = model.conv(1).out_channels();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut gram = ContributionGram::new(c);
    let mut z = vec![0.0; c * positions * out];
    let mut patch = vec![0.0; k * k];
    for s in 0..n {
        let sample = &act.conv1[s * c * h * w..(s + 1) * c * h * w];
        for p in 0..positions {
            let (y, x) = (rng.below(oh), rng.below(ow));
            for ch in 0..c {
                let plane = &sample[ch * h * w..(ch + 1) * h * w];
                for ky in 0..k {
                    patch[ky * k..(ky + 1) * k].copy_from_slice(&plane[(y + ky) * w + x..(y + ky) * w + x + k]);
                }
                let dst = &mut z[ch * positions * out + p * out..ch * positions * out + (p + 1) * out];
                for (o, d) in dst.iter_mut().enumerate() {
                    let wk = &w2[(o * c + ch) * k * k..(o * c + ch + 1) * k * k];
                    *d = patch.iter().zip(wk).map(|(a, b)| a * b).sum();
                }
            }
        }
        gram.add(&z);
    }
    gram
}

/// Gram of conv2 channel contributions to fc1 pre-activations.
fn conv2_gram<T: Real>(model: &ModelGraph<T>, act: &Activations, n: usize) -> ContributionGram {
    let c = model.spec.filters[1];
    let fc = model.dense(0);
    let (out, din) = (fc.out_features(), fc.in_features());
    let group = din / c;
    let w: Vec<f64> = fc.weight.data().iter().map(|v| v.as_f64()).collect();
    let mut gram = ContributionGram::new(c);
    let mut z = vec![0.0; c * out];
    for s in 0..n {
        let a = &act.pooled[s * din..(s + 1) * din];
        for ch in 0..c {
            let block = &a[ch * group..(ch + 1) * group];
            for o in 0..out {
                let row = &w[o * din + ch * group..o * din + (ch + 1) * group];
                z[ch * out + o] = block.iter().zip(row).map(|(x, y)| x * y).sum();
            }
        }
        gram.add(&z);
    }
    gram
}

/// Ranks conv1 by reconstruction of conv2 and conv2 by reconstruction of
/// fc1; fc1 neurons fall back to incoming-weight L1.
///
/// The full greedy removal sequence is recorded, so keeping the first `n`
/// of the keep-order is exactly the greedy result for target width `n`.
pub fn rank_thinet<T: Real>(model: &mut ModelGraph<T>, calib: &PatchSet, cfg: &ThinetConfig) -> Result<FilterRanking> {
    require_two_convs(model)?;
    if model.spec.kind != ModelKind::Cnn2d {
        return Err(PruneError::Unsupported("ThiNet is implemented for CNN2D".into()));
    }
    let samples = cfg.samples.max(MIN_CALIBRATION);
    if calib.len() < samples {
        return Err(PruneError::Calibration {
            needed: samples,
            got: calib.len(),
        });
    }
    let mut rng = RngState::new(cfg.seed);
    let mut idx = rng.permutation(calib.len());
    idx.truncate(samples);
    let act = activations(model, calib, &idx)?;
    let g1 = conv1_gram(model, &act, cfg.positions.max(1), &mut rng);
    let g2 = conv2_gram(model, &act, samples);
    log::debug!("thinet: {} and {} contribution rows", g1.rows(), g2.rows());
    Ok(FilterRanking {
        method: "thinet".into(),
        layers: vec![
            ranking_from_removal(PrunableLayer::Conv1, greedy_removal(&g1))?,
            ranking_from_removal(PrunableLayer::Conv2, greedy_removal(&g2))?,
            fc1_l1(model)?,
        ],
    })
}
