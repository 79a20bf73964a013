//! Shared-trunk networks with several classifier heads, used by the online
//! methods that distill between branches (ONE, CL-ILR, OKDDip).
//!
//! Branch 0 is the ordinary student: `base` holds the trunk and its head,
//! so deployment just drops the extra heads.

use hsib_models::{Dense, ModelGraph, ModelKind, Trainable};
use hsib_tensor::{Real, RngState, Tape, Tensor, Var};

use crate::error::{DistillError, Result};

#[derive(Debug, Clone)]
pub struct Head<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

/// Query and key projections `[d, hidden]` for peer attention.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct MultiBranch<T> {
    pub base: ModelGraph<T>,
    /// Heads for branches `1..m`.
    pub heads: Vec<Head<T>>,
    /// Maps the flattened trunk output to one logit per branch.
    pub gate: Option<Dense<T>>,
    pub attention: Option<Attention<T>>,
}

#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub logits: Vec<Var>,
    /// fc1 activations per branch.
    pub hidden: Vec<Var>,
    /// Flattened trunk output shared by every head.
    pub trunk: Var,
    pub gate_logits: Option<Var>,
}

fn dense_forward<T: Real>(tape: &mut Tape<T>, d: &Dense<T>, x: Var) -> Result<Var> {
    let w = tape.param(&d.weight);
    let b = tape.param(&d.bias);
    let h = tape.linear(x, w, Some(b))?;
    Ok(if d.relu { tape.relu(h)? } else { h })
}

impl<T: Real> MultiBranch<T> {
    /// Wraps `base` as branch 0 and adds `branches - 1` freshly initialized
    /// heads with the same shape as its classifier.
    pub fn new(
        base: ModelGraph<T>,
        branches: usize,
        gate: bool,
        attn_dim: Option<usize>,
        rng: &mut RngState,
    ) -> Result<Self> {
        if branches == 0 {
            return Err(DistillError::Config("a multi-branch model needs at least one branch".into()));
        }
        let spec = base.spec.clone();
        let mut heads = Vec::with_capacity(branches - 1);
        for _ in 1..branches {
            let fresh = ModelGraph::<T>::build(&spec, rng)?;
            heads.push(Head {
                fc1: fresh.dense(0).clone(),
                fc2: fresh.dense(1).clone(),
            });
        }
        let flat = base.dense(0).in_features();
        let gate = gate.then(|| {
            let bound = 1.0 / (flat as f64).sqrt();
            Dense {
                name: "gate".into(),
                weight: rng.uniform_tensor(vec![branches, flat], bound).with_grad(),
                bias: rng.uniform_tensor(vec![branches], bound).with_grad(),
                relu: false,
            }
        });
        let attention = attn_dim.map(|d| {
            let h = spec.hidden;
            let bound = 1.0 / (h as f64).sqrt();
            Attention {
                wq: rng.uniform_tensor(vec![d, h], bound).with_grad(),
                wk: rng.uniform_tensor(vec![d, h], bound).with_grad(),
            }
        });
        Ok(Self {
            base,
            heads,
            gate,
            attention,
        })
    }

    pub fn branches(&self) -> usize {
        self.heads.len() + 1
    }

    pub fn set_training(&mut self, on: bool) {
        self.base.set_training(on);
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<BranchOutputs> {
        let f = self.base.forward(tape, x)?;
        let trunk = match (self.base.spec.kind, f.taps.pool) {
            (ModelKind::Mlp, _) => x,
            (_, Some(p)) => tape.flatten(p)?,
            (_, None) => return Err(DistillError::Shape("trunk has no pooled output".into())),
        };
        let h0 = f
            .taps
            .hidden
            .ok_or_else(|| DistillError::Shape("missing hidden activations".into()))?;
        let mut logits = vec![f.logits];
        let mut hidden = vec![h0];
        for head in &self.heads {
            let h = dense_forward(tape, &head.fc1, trunk)?;
            logits.push(dense_forward(tape, &head.fc2, h)?);
            hidden.push(h);
        }
        let gate_logits = match &self.gate {
            Some(g) => Some(dense_forward(tape, g, trunk)?),
            None => None,
        };
        Ok(BranchOutputs {
            logits,
            hidden,
            trunk,
            gate_logits,
        })
    }

    /// The deployed student: trunk plus branch 0.
    pub fn deploy(&self) -> ModelGraph<T> {
        let mut m = self.base.clone();
        m.set_training(false);
        m
    }

    /// Trunk plus branch `i` as a standalone model.
    pub fn branch_model(&self, i: usize) -> ModelGraph<T> {
        let mut m = self.deploy();
        if i > 0 {
            let h = &self.heads[i - 1];
            *m.dense_mut(0) = Dense {
                name: "fc1".into(),
                ..h.fc1.clone()
            };
            *m.dense_mut(1) = Dense {
                name: "fc2".into(),
                ..h.fc2.clone()
            };
        }
        m
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.base.params_mut();
        for h in &mut self.heads {
            out.extend([&mut h.fc1.weight, &mut h.fc1.bias, &mut h.fc2.weight, &mut h.fc2.bias]);
        }
        if let Some(g) = &mut self.gate {
            out.extend([&mut g.weight, &mut g.bias]);
        }
        if let Some(a) = &mut self.attention {
            out.extend([&mut a.wq, &mut a.wk]);
        }
        out
    }
}

impl Trainable for MultiBranch<f32> {
    fn trainable_params(&mut self) -> Vec<&mut Tensor<f32>> {
        self.params_mut().into_iter().filter(|p| p.requires_grad()).collect()
    }

    fn set_training(&mut self, on: bool) {
        MultiBranch::set_training(self, on)
    }
}
