//! Soft filter pruning: zero the weakest filters after every epoch but keep
//! them trainable, so they may grow back.

use hsib_data::PatchSet;
use hsib_models::{fit, Conv, History, ModelGraph, TrainConfig};
use hsib_tensor::{Real, RngState};
use serde::Serialize;

use crate::error::{PruneError, Result};
use crate::ranking::{fc1_l1, filter_l2, require_two_convs, FilterRanking, LayerRanking};
use crate::target::{PrunableLayer, PruneTarget};

/// Zeroes a filter's weights, bias and BN affine pair, so that its output
/// after BN and ReLU is exactly zero in both training and eval mode.
pub fn zero_filters<T: Real>(conv: &mut Conv<T>, idx: &[usize]) {
    let fl = conv.filter_len();
    for &i in idx {
        conv.weight.data_mut()[i * fl..(i + 1) * fl].fill(T::zero());
        conv.bias.data_mut()[i] = T::zero();
        if let Some(bn) = &mut conv.bn {
            bn.gamma.data_mut()[i] = T::zero();
            bn.beta.data_mut()[i] = T::zero();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SfpEpoch {
    pub epoch: usize,
    /// Filters zeroed at the end of this epoch, per conv layer.
    pub zeroed: [Vec<usize>; 2],
    /// Filters zeroed after the previous epoch that had non-zero weights
    /// again before this epoch's zeroing.
    pub revived: [usize; 2],
}

#[derive(Debug, Clone)]
pub struct SfpOutcome {
    pub history: History,
    /// Final L2 ranking of conv filters (zeroed filters last); fc1 by L1.
    pub ranking: FilterRanking,
    pub epochs: Vec<SfpEpoch>,
}

fn lowest<T: Real>(conv: &Conv<T>, keep: usize, layer: PrunableLayer) -> Result<(Vec<usize>, LayerRanking)> {
    let r = LayerRanking::from_scores(layer, filter_l2(conv))?;
    let mut z = r.order[keep..].to_vec();
    z.sort_unstable();
    Ok((z, r))
}

pub fn sfp_train(
    model: &mut ModelGraph<f32>,
    data: &PatchSet,
    target: &PruneTarget,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<SfpOutcome> {
    require_two_convs(model)?;
    target.check_strict(&model.spec)?;
    let kind = model.spec.kind;
    let keep = [target.widths[0], target.widths[1]];
    let mut epochs: Vec<SfpEpoch> = Vec::new();
    let layers = [PrunableLayer::Conv1, PrunableLayer::Conv2];
    let history = fit(
        model,
        data,
        kind,
        cfg,
        rng,
        |m, tape, b, _| {
            let x = tape.input(b.shape.clone(), b.x.clone())?;
            let f = m.forward(tape, x)?;
            Ok(tape.cross_entropy(f.logits, &b.labels)?)
        },
        |m, epoch| {
            let mut rec = SfpEpoch {
                epoch,
                zeroed: [Vec::new(), Vec::new()],
                revived: [0, 0],
            };
            for ci in 0..2 {
                let norms = filter_l2(m.conv(ci));
                if let Some(prev) = epochs.last() {
                    rec.revived[ci] = prev.zeroed[ci].iter().filter(|&&i| norms[i] > 0.0).count();
                }
                let (z, _) = lowest(m.conv(ci), keep[ci], layers[ci]).map_err(|e| match e {
                    PruneError::Model(me) => me,
                    other => hsib_models::ModelError::Spec(other.to_string()),
                })?;
                zero_filters(m.conv_mut(ci), &z);
                rec.zeroed[ci] = z;
            }
            epochs.push(rec);
            Ok(None)
        },
    )?;
    let ranking = FilterRanking {
        method: "sfp".into(),
        layers: vec![
            lowest(model.conv(0), keep[0], PrunableLayer::Conv1)?.1,
            lowest(model.conv(1), keep[1], PrunableLayer::Conv2)?.1,
            fc1_l1(model)?,
        ],
    };
    Ok(SfpOutcome {
        history,
        ranking,
        epochs,
    })
}
