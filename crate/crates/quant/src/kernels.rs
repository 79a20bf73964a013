//! Integer matrix products.
//!
//! Operands hold 8-bit values widened to `i32`; products accumulate in
//! `i32`, and zero-point corrections are applied in `i64`.

use crate::error::{QuantError, Result};

/// Deepest reduction whose worst case `k * 128 * 255` still fits in `i32`.
pub const MAX_DEPTH: usize = (i32::MAX as usize) / (128 * 255);

/// `C = A B` for row-major `A: m x k` and `B: k x n`.
pub fn gemm_i32(m: usize, k: usize, n: usize, a: &[i32], b: &[i32]) -> Vec<i32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0i32; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0 {
                continue;
            }
            for (r, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *r += av * bv;
            }
        }
    }
    c
}

/// `sum_p (a[i,p] + za) * (b[p,j] + zb)`, i.e. the product of the
/// zero-point-shifted operands, computed from the raw `i32` product plus
/// row/column sum corrections.
pub fn affine_gemm(m: usize, k: usize, n: usize, a: &[i32], za: i64, b: &[i32], zb: i64) -> Result<Vec<i64>> {
    if a.len() != m * k || b.len() != k * n {
        return Err(QuantError::Shape {
            op: "affine_gemm",
            msg: format!("{m}x{k} by {k}x{n} with buffers {} and {}", a.len(), b.len()),
        });
    }
    if k > MAX_DEPTH {
        return Err(QuantError::Overflow { depth: k, max: MAX_DEPTH });
    }
    if k == 0 {
        return Ok(vec![0; m * n]);
    }
    let raw = gemm_i32(m, k, n, a, b);
    let row_sums: Vec<i64> = a.chunks(k).map(|r| r.iter().map(|&v| v as i64).sum()).collect();
    let mut col_sums = vec![0i64; n];
    for r in b.chunks(n) {
        for (s, &v) in col_sums.iter_mut().zip(r) {
            *s += v as i64;
        }
    }
    let kz = k as i64 * za * zb;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(raw[i * n + j] as i64 + zb * row_sums[i] + za * col_sums[j] + kz);
        }
    }
    Ok(out)
}
