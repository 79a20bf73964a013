//! Batch-norm folding.

use hsib_models::ModelGraph;

/// Copy of `model` with each conv's eval-mode batch norm folded into its
/// weights and bias:
/// `w' = w * g / sqrt(v + eps)`, `b' = (b - m) * g / sqrt(v + eps) + beta`.
///
/// The folded model computes the same eval-mode function and has no BN.
pub fn fold_batch_norm(model: &ModelGraph<f32>) -> ModelGraph<f32> {
    let mut out = model.clone();
    for c in out.convs_mut() {
        let Some(bn) = c.bn.take() else { continue };
        let per = c.filter_len();
        let (g, beta) = (bn.gamma.data(), bn.beta.data());
        for o in 0..c.out_channels() {
            let k = g[o] as f64 / (bn.running_var[o] as f64 + bn.eps).sqrt();
            for w in &mut c.weight.data_mut()[o * per..(o + 1) * per] {
                *w = (*w as f64 * k) as f32;
            }
            let b = &mut c.bias.data_mut()[o];
            *b = ((*b as f64 - bn.running_mean[o] as f64) * k + beta[o] as f64) as f32;
        }
    }
    out.set_training(false);
    out
}
