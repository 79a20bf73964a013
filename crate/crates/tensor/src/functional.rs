//! Tape-free probability helpers.

use crate::error::{Result, TensorError};
use crate::real::Real;

/// Max-shifted `softmax(z / t)` written back into `row`.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], t: T) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - m) / t).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

pub(crate) fn log_softmax_in_place<T: Real>(row: &mut [T], t: T) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| ((v - m) / t).exp()).sum::<T>().ln();
    row.iter_mut().for_each(|v| *v = (*v - m) / t - lse);
}

fn check_t<T: Real>(t: T) -> Result<()> {
    if t > T::zero() && t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::InvalidArgument {
            op: "softmax_t",
            msg: format!("temperature must be > 0, got {t}"),
        })
    }
}

/// Temperature softmax of a single logit vector.
pub fn softmax_t<T: Real>(z: &[T], t: T) -> Result<Vec<T>> {
    check_t(t)?;
    if z.is_empty() {
        return Err(TensorError::InvalidShape {
            op: "softmax_t",
            msg: "empty logits".into(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "softmax_t" });
    }
    let mut p = z.to_vec();
    softmax_in_place(&mut p, t);
    Ok(p)
}

pub fn log_softmax_t<T: Real>(z: &[T], t: T) -> Result<Vec<T>> {
    check_t(t)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "log_softmax_t" });
    }
    let mut p = z.to_vec();
    log_softmax_in_place(&mut p, t);
    Ok(p)
}

/// `KL(p || q) = Σ p ln(p / q)`, with `0 ln(0/q) = 0`.
///
/// A zero in `q` where `p` has mass is reported rather than turned into `inf`.
pub fn kl_div<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(TensorError::ShapeMismatch {
            op: "kl_div",
            expected: vec![p.len()],
            actual: vec![q.len()],
        });
    }
    let tol = T::lit(1e-6);
    for (name, d) in [("p", p), ("q", q)] {
        if d.iter().any(|&v| v < T::zero() || !v.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: "kl_div",
                msg: format!("{name} has negative or non-finite entries"),
            });
        }
        let s: T = d.iter().copied().sum();
        if (s - T::one()).abs() > tol {
            return Err(TensorError::InvalidArgument {
                op: "kl_div",
                msg: format!("{name} sums to {s}, not 1"),
            });
        }
    }
    let mut total = T::zero();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == T::zero() {
            continue;
        }
        if qi == T::zero() {
            return Err(TensorError::KlUndefined { index: i });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total.max(T::zero()))
}

/// Mean cross entropy of integer labels under `softmax(logits)` for row-major
/// `[n, k]` logits.
pub fn cross_entropy<T: Real>(logits: &[T], k: usize, labels: &[usize]) -> Result<T> {
    if k == 0 || logits.len() != labels.len() * k {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            expected: vec![labels.len(), k],
            actual: vec![logits.len()],
        });
    }
    let mut total = T::zero();
    for (row, &y) in logits.chunks(k).zip(labels) {
        if y >= k {
            return Err(TensorError::LabelOutOfRange { label: y, classes: k });
        }
        let ls = log_softmax_t(row, T::one())?;
        total -= ls[y];
    }
    Ok(total / T::from_usize(labels.len()).expect("n"))
}
