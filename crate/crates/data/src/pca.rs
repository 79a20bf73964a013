//! Principal component analysis through a cyclic Jacobi eigensolver.

use hsib_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{invalid, DataError, Result};

pub const JACOBI_TOL: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct Eigen {
    /// Descending.
    pub values: Vec<f64>,
    /// Row `i` is the unit eigenvector of `values[i]`.
    pub vectors: Vec<f64>,
    pub sweeps: usize,
}

fn off_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for p in 0..n {
        for q in 0..n {
            if p != q {
                s += a[p * n + q] * a[p * n + q];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi rotations on a row-major symmetric `n x n` matrix.
///
/// Stops once the off-diagonal Frobenius norm is at most `tol * |trace|`.
/// Eigenvectors are sign-normalized so their largest-magnitude entry is
/// positive.
pub fn jacobi_eigen(a: &[f64], n: usize, tol: f64, max_sweeps: usize) -> Result<Eigen> {
    if a.len() != n * n || n == 0 {
        return Err(invalid("matrix", format!("{} entries for n = {n}", a.len())));
    }
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum::<f64>().abs();
    let mut sweeps = 0;
    loop {
        let off = off_norm(&a, n);
        if off <= tol * trace {
            break;
        }
        if sweeps == max_sweeps {
            return Err(DataError::NoConvergence { sweeps, off });
        }
        sweeps += 1;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &col in &order {
        let mut e: Vec<f64> = (0..n).map(|k| v[k * n + col]).collect();
        let mut big = 0;
        for k in 1..n {
            if e[k].abs() > e[big].abs() {
                big = k;
            }
        }
        if e[big] < 0.0 {
            e.iter_mut().for_each(|x| *x = -*x);
        }
        vectors.extend(e);
    }
    Ok(Eigen {
        values,
        vectors,
        sweeps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub bands: usize,
    pub mean: Vec<f64>,
    /// `k x bands`, row-orthonormal.
    pub components: Vec<f64>,
    /// Descending, length `k`.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    /// Fits on a row-major `[n, bands]` sample matrix.
    pub fn fit(samples: &[f64], n: usize, bands: usize, k: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid("pca", format!("need at least 2 samples, got {n}")));
        }
        if k == 0 || k > bands {
            return Err(invalid("pca", format!("k = {k} outside 1..={bands}")));
        }
        if samples.len() != n * bands {
            return Err(invalid("pca", "sample matrix has wrong length"));
        }
        let mut mean = vec![0.0; bands];
        for row in samples.chunks(bands) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> = samples
            .chunks(bands)
            .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m).collect::<Vec<_>>())
            .collect();
        let mut cov = vec![0.0; bands * bands];
        f64::gemm(
            bands,
            n,
            bands,
            1.0 / (n as f64 - 1.0),
            &centered,
            1,
            bands,
            &centered,
            bands,
            1,
            0.0,
            &mut cov,
            bands,
            1,
        );
        // enforce exact symmetry before rotating
        for p in 0..bands {
            for q in p + 1..bands {
                let s = 0.5 * (cov[p * bands + q] + cov[q * bands + p]);
                cov[p * bands + q] = s;
                cov[q * bands + p] = s;
            }
        }
        let eig = jacobi_eigen(&cov, bands, JACOBI_TOL, JACOBI_MAX_SWEEPS)?;
        Ok(Self {
            bands,
            mean,
            components: eig.vectors[..k * bands].to_vec(),
            eigenvalues: eig.values[..k].to_vec(),
        })
    }

    /// Fits on the spectra of the given pixels.
    pub fn fit_cube(cube: &HsiCube, pixels: &[usize], k: usize) -> Result<Self> {
        let m = cube.pixel_matrix(pixels);
        Self::fit(&m, pixels.len(), cube.bands(), k)
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.bands..(i + 1) * self.bands]
    }

    pub fn project(&self, spectrum: &[f64], k: usize) -> Vec<f64> {
        (0..k)
            .map(|i| {
                self.component(i)
                    .iter()
                    .zip(spectrum.iter().zip(&self.mean))
                    .map(|(c, (x, m))| c * (x - m))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (i, &s) in scores.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.component(i)) {
                *o += s * c;
            }
        }
        out
    }

    /// Projects every pixel onto the first `k` components.
    pub fn transform(&self, cube: &HsiCube, k: usize) -> Result<HsiCube> {
        if cube.bands() != self.bands {
            return Err(invalid(
                "pca",
                format!("model has {} bands, cube has {}", self.bands, cube.bands()),
            ));
        }
        if k == 0 || k > self.k() {
            return Err(invalid("pca", format!("k = {k} outside 1..={}", self.k())));
        }
        let p = cube.pixels();
        let b = self.bands;
        let mut out = vec![0.0f32; k * p];
        const CHUNK: usize = 4096;
        let mut xs = vec![0.0f64; CHUNK * b];
        let mut ys = vec![0.0f64; CHUNK * k];
        for start in (0..p).step_by(CHUNK) {
            let len = CHUNK.min(p - start);
            for band in 0..b {
                let src = &cube.band(band)[start..start + len];
                for (i, &v) in src.iter().enumerate() {
                    xs[i * b + band] = v as f64 - self.mean[band];
                }
            }
            f64::gemm(
                len,
                b,
                k,
                1.0,
                &xs,
                b,
                1,
                &self.components,
                1,
                b,
                0.0,
                &mut ys,
                k,
                1,
            );
            for i in 0..len {
                for c in 0..k {
                    out[c * p + start + i] = ys[i * k + c] as f32;
                }
            }
        }
        HsiCube::new(k, cube.height(), cube.width(), out)
    }
}
