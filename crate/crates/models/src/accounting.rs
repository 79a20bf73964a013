use std::collections::BTreeMap;

use hsib_tensor::Real;
use serde::Serialize;

use crate::error::{ModelError, Result};
use crate::graph::ModelGraph;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Weights plus biases per conv/FC layer.
    pub layers: Vec<(String, usize)>,
    /// BatchNorm scale and shift, reported separately and not in `total`.
    pub bn: usize,
    pub total: usize,
}

pub fn count_params<T: Real>(model: &ModelGraph<T>) -> ParamCount {
    let layers = model.layer_params();
    let total = layers.iter().map(|(_, n)| n).sum();
    let bn = model
        .convs()
        .filter_map(|c| c.bn.as_ref())
        .map(|bn| bn.gamma.len() + bn.beta.len())
        .sum();
    ParamCount { layers, bn, total }
}

/// Bytes per stored parameter, by layer name.
pub type DtypeMap = BTreeMap<String, usize>;

pub fn uniform_dtype<T: Real>(model: &ModelGraph<T>, bytes: usize) -> DtypeMap {
    model.layer_params().into_iter().map(|(n, _)| (n, bytes)).collect()
}

/// FC layers in int8, everything else f32.
pub fn fc_int8_dtype<T: Real>(model: &ModelGraph<T>) -> DtypeMap {
    model
        .layer_params()
        .into_iter()
        .map(|(n, _)| {
            let b = if n.starts_with("fc") { 1 } else { 4 };
            (n, b)
        })
        .collect()
}

/// Decimal megabytes: `sum(params_layer * bytes_layer) / 1e6`.
pub fn estimate_memory<T: Real>(model: &ModelGraph<T>, dtypes: &DtypeMap) -> Result<f64> {
    let mut bytes = 0usize;
    for (name, n) in model.layer_params() {
        let b = dtypes.get(&name).ok_or_else(|| ModelError::MissingLayer(name.clone()))?;
        bytes += n * b;
    }
    Ok(bytes as f64 / 1e6)
}
