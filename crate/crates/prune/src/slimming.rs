//! Network slimming: L1 pressure on batch-norm scales, then rank by |γ|.

use hsib_data::PatchSet;
use hsib_models::{fit, History, ModelGraph, TrainConfig};
use hsib_tensor::{Real, RngState};

use crate::error::{PruneError, Result};
use crate::ranking::{fc1_l1, require_two_convs, FilterRanking, LayerRanking};
use crate::target::PrunableLayer;

fn require_bn<T: Real>(model: &ModelGraph<T>) -> Result<()> {
    require_two_convs(model)?;
    if model.convs().any(|c| c.bn.is_none()) {
        return Err(PruneError::NoBatchNorm);
    }
    Ok(())
}

/// Trains with `CE + lambda * sum |γ|` over every BN scale. The subgradient
/// of `|γ|` at zero is zero. With `lambda = 0` this is plain training.
pub fn train_slimming(
    model: &mut ModelGraph<f32>,
    data: &PatchSet,
    cfg: &TrainConfig,
    lambda: f64,
    rng: &mut RngState,
) -> Result<History> {
    require_bn(model)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(PruneError::Target(format!("slimming lambda {lambda} must be >= 0")));
    }
    let kind = model.spec.kind;
    Ok(fit(
        model,
        data,
        kind,
        cfg,
        rng,
        |m, tape, b, _| {
            let x = tape.input(b.shape.clone(), b.x.clone())?;
            let f = m.forward(tape, x)?;
            let mut loss = tape.cross_entropy(f.logits, &b.labels)?;
            if lambda > 0.0 {
                for c in m.convs() {
                    let bn = c.bn.as_ref().expect("checked");
                    let g = tape.param(&bn.gamma);
                    let a = tape.abs(g)?;
                    let s = tape.sum(a)?;
                    let s = tape.mul_scalar(s, lambda as f32)?;
                    loss = tape.add(loss, s)?;
                }
            }
            Ok(loss)
        },
        |_, _| Ok(None),
    )?)
}

pub fn bn_scales<T: Real>(model: &ModelGraph<T>, conv: usize) -> Result<Vec<f64>> {
    require_bn(model)?;
    let bn = model.conv(conv).bn.as_ref().expect("checked");
    Ok(bn.gamma.data().iter().map(|g| g.as_f64().abs()).collect())
}

/// Conv filters by |γ| descending; fc1 has no BN and uses incoming-weight L1.
pub fn rank_slimming<T: Real>(model: &ModelGraph<T>) -> Result<FilterRanking> {
    require_bn(model)?;
    Ok(FilterRanking {
        method: "slimming".into(),
        layers: vec![
            LayerRanking::from_scores(PrunableLayer::Conv1, bn_scales(model, 0)?)?,
            LayerRanking::from_scores(PrunableLayer::Conv2, bn_scales(model, 1)?)?,
            fc1_l1(model)?,
        ],
    })
}
