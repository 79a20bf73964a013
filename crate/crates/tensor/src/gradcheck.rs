//! Central finite-difference gradient checking.

use crate::real::Real;

/// Largest relative error between `analytic` and the central difference of
/// `f` around `x`, using `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(
    x: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut xs = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = f(&xs);
        xs[i] = orig - h;
        let down = f(&xs);
        xs[i] = orig;
        let num = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(num.abs()).max(floor);
        worst = worst.max((analytic[i] - num).abs() / denom);
    }
    worst
}

/// Convenience for checks in the element type of a tensor.
pub fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}
