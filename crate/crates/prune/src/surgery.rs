//! Removing filters and neurons together with every weight that reads them.

use hsib_models::{BatchNorm, ModelGraph};
use hsib_tensor::{Real, Tensor};

use crate::error::{PruneError, Result};
use crate::ranking::{require_two_convs, FilterRanking};
use crate::target::{PrunableLayer, PruneTarget};

fn check_keep(keep: &[usize], width: usize, layer: PrunableLayer) -> Result<()> {
    if keep.is_empty() {
        return Err(PruneError::Target(format!("{layer}: nothing kept")));
    }
    if keep.windows(2).any(|w| w[0] >= w[1]) || keep[keep.len() - 1] >= width {
        return Err(PruneError::Ranking(format!(
            "{layer}: keep set must be strictly increasing below {width}"
        )));
    }
    Ok(())
}

fn rebuild<T: Real>(old: &Tensor<T>, shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
    let t = Tensor::from_vec(shape, data)?;
    Ok(if old.requires_grad() { t.with_grad() } else { t })
}

/// Keeps whole blocks of `block` consecutive values along the leading axis.
fn select_rows<T: Real>(t: &Tensor<T>, keep: &[usize]) -> Result<Tensor<T>> {
    let block = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(keep.len() * block);
    for &k in keep {
        data.extend_from_slice(&t.data()[k * block..(k + 1) * block]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = keep.len();
    rebuild(t, shape, data)
}

/// Keeps input channels (axis 1) of a conv weight or groups of `group`
/// columns of a dense weight.
fn select_inputs<T: Real>(t: &Tensor<T>, keep: &[usize], group: usize, new_shape: Vec<usize>) -> Result<Tensor<T>> {
    let rows = t.shape()[0];
    let row_len = t.len() / rows;
    let mut data = Vec::with_capacity(rows * keep.len() * group);
    for r in t.data().chunks(row_len) {
        for &k in keep {
            data.extend_from_slice(&r[k * group..(k + 1) * group]);
        }
    }
    rebuild(t, new_shape, data)
}

fn select_bn<T: Real>(bn: &BatchNorm<T>, keep: &[usize]) -> Result<BatchNorm<T>> {
    let pick = |v: &[T]| keep.iter().map(|&k| v[k]).collect::<Vec<_>>();
    Ok(BatchNorm {
        gamma: select_rows(&bn.gamma, keep)?,
        beta: select_rows(&bn.beta, keep)?,
        running_mean: pick(&bn.running_mean),
        running_var: pick(&bn.running_var),
        eps: bn.eps,
        momentum: bn.momentum,
    })
}

/// Prunes one layer to the given (sorted) keep set.
///
/// conv1 filters take their BN entries and conv2's matching input kernels
/// with them. conv2 filters take fc1's flatten block for that channel (all
/// pooled positions). fc1 neurons take fc2's matching input column. The
/// logits layer keeps all outputs.
pub fn prune_layer<T: Real>(model: &ModelGraph<T>, layer: PrunableLayer, keep: &[usize]) -> Result<ModelGraph<T>> {
    require_two_convs(model)?;
    check_keep(keep, layer.width(&model.spec), layer)?;
    let mut out = model.clone();
    match layer {
        PrunableLayer::Conv1 | PrunableLayer::Conv2 => {
            let ci = layer.index();
            {
                let c = out.conv_mut(ci);
                c.weight = select_rows(&c.weight, keep)?;
                c.bias = select_rows(&c.bias, keep)?;
                if let Some(bn) = &c.bn {
                    c.bn = Some(select_bn(bn, keep)?);
                }
            }
            if ci == 0 {
                let next = out.conv_mut(1);
                let mut shape = next.weight.shape().to_vec();
                let group = shape[2..].iter().product();
                shape[1] = keep.len();
                next.weight = select_inputs(&next.weight, keep, group, shape)?;
                out.spec.filters[0] = keep.len();
            } else {
                let group = model.spec.flatten_len()? / model.spec.filters[1];
                let fc = out.dense_mut(0);
                let shape = vec![fc.out_features(), keep.len() * group];
                fc.weight = select_inputs(&fc.weight, keep, group, shape)?;
                out.spec.filters[1] = keep.len();
            }
        }
        PrunableLayer::Fc1 => {
            {
                let fc = out.dense_mut(0);
                fc.weight = select_rows(&fc.weight, keep)?;
                fc.bias = select_rows(&fc.bias, keep)?;
            }
            let fc2 = out.dense_mut(1);
            let shape = vec![fc2.out_features(), keep.len()];
            fc2.weight = select_inputs(&fc2.weight, keep, 1, shape)?;
            out.spec.hidden = keep.len();
        }
    }
    out.check_consistency()?;
    Ok(out)
}

/// Prunes all three layers to `target` using `ranking`'s keep-orders.
pub fn apply_prune<T: Real>(model: &ModelGraph<T>, ranking: &FilterRanking, target: &PruneTarget) -> Result<ModelGraph<T>> {
    require_two_convs(model)?;
    ranking.check_covers(model)?;
    target.check(&model.spec)?;
    let mut m = model.clone();
    for layer in PrunableLayer::ALL {
        let keep = ranking.get(layer).expect("covered").keep(target.width(layer));
        m = prune_layer(&m, layer, &keep)?;
    }
    Ok(m)
}
