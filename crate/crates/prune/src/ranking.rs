//! Importance scores and keep-orders.

use hsib_models::{Conv, Dense, ModelGraph};
use hsib_tensor::Real;
use serde::Serialize;

use crate::error::{PruneError, Result};
use crate::target::PrunableLayer;

/// Scores of one layer's filters or neurons and the order in which they
/// are kept (most important first).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRanking {
    pub layer: PrunableLayer,
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
}

impl LayerRanking {
    /// Orders by descending score; equal scores keep the lower index first.
    pub fn from_scores(layer: PrunableLayer, scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(PruneError::Ranking(format!("{layer} score {i} is not finite")));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(Self { layer, scores, order })
    }

    /// Uses an explicit keep-order, e.g. the reverse of a greedy removal
    /// sequence.
    pub fn from_order(layer: PrunableLayer, scores: Vec<f64>, order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; scores.len()];
        if order.len() != scores.len() {
            return Err(PruneError::Ranking(format!(
                "{layer}: order has {} entries for {} scores",
                order.len(),
                scores.len()
            )));
        }
        for &i in &order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(PruneError::Ranking(format!("{layer}: order is not a permutation")));
            }
        }
        Ok(Self { layer, scores, order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The `n` most important indices in ascending index order, so that
    /// surviving channels keep their relative positions.
    pub fn keep(&self, n: usize) -> Vec<usize> {
        let mut k = self.order[..n.min(self.order.len())].to_vec();
        k.sort_unstable();
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterRanking {
    pub method: String,
    pub layers: Vec<LayerRanking>,
}

impl FilterRanking {
    pub fn get(&self, layer: PrunableLayer) -> Option<&LayerRanking> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Errors unless every prunable layer is ranked with the model's width.
    pub fn check_covers<T: Real>(&self, model: &ModelGraph<T>) -> Result<()> {
        for l in PrunableLayer::ALL {
            let r = self
                .get(l)
                .ok_or_else(|| PruneError::Ranking(format!("{l} is not ranked")))?;
            let w = l.width(&model.spec);
            if r.len() != w {
                return Err(PruneError::Ranking(format!(
                    "{l} ranking has {} entries but the layer has {w}",
                    r.len()
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn require_two_convs<T: Real>(model: &ModelGraph<T>) -> Result<()> {
    if model.convs().count() != 2 || model.denses().count() != 2 {
        return Err(PruneError::Unsupported(format!(
            "{} has no prunable conv layers",
            model.spec.kind
        )));
    }
    Ok(())
}

pub fn filter_l1<T: Real>(conv: &Conv<T>) -> Vec<f64> {
    conv.weight
        .data()
        .chunks(conv.filter_len())
        .map(|f| f.iter().map(|w| w.as_f64().abs()).sum())
        .collect()
}

pub fn filter_l2<T: Real>(conv: &Conv<T>) -> Vec<f64> {
    conv.weight
        .data()
        .chunks(conv.filter_len())
        .map(|f| f.iter().map(|w| w.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// L1 norm of each neuron's incoming weights.
pub fn row_l1<T: Real>(dense: &Dense<T>) -> Vec<f64> {
    dense
        .weight
        .data()
        .chunks(dense.in_features())
        .map(|r| r.iter().map(|w| w.as_f64().abs()).sum())
        .collect()
}

/// fc1 ranking by incoming-weight L1; the fallback for criteria defined only
/// on conv filters.
pub(crate) fn fc1_l1<T: Real>(model: &ModelGraph<T>) -> Result<LayerRanking> {
    LayerRanking::from_scores(PrunableLayer::Fc1, row_l1(model.dense(0)))
}

/// Smallest sum of absolute weights is least important.
pub fn rank_l1<T: Real>(model: &ModelGraph<T>) -> Result<FilterRanking> {
    require_two_convs(model)?;
    Ok(FilterRanking {
        method: "l1".into(),
        layers: vec![
            LayerRanking::from_scores(PrunableLayer::Conv1, filter_l1(model.conv(0)))?,
            LayerRanking::from_scores(PrunableLayer::Conv2, filter_l1(model.conv(1)))?,
            fc1_l1(model)?,
        ],
    })
}
