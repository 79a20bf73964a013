//! First-order optimizers over a list of parameter tensors.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        Self::Sgd { momentum }
    }
}

/// Optimizer state. Slots are matched to parameters by position, so the
/// same ordering must be passed to every [`Optimizer::step`].
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(TensorError::InvalidArgument {
                op: "optimizer",
                msg: format!("learning rate must be > 0, got {lr}"),
            });
        }
        Ok(Self {
            kind,
            lr,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "optimizer",
                msg: format!("learning rate must be > 0, got {lr}"),
            });
        }
        self.lr = lr;
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Drops moment buffers, e.g. after parameter shapes change.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    /// Updates every parameter that holds a gradient. Parameters without a
    /// gradient are left untouched (their moments are not decayed either).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        self.step += 1;
        let lr = T::lit(self.lr);
        let wd = T::lit(self.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::lit(momentum);
                    for k in 0..data.len() {
                        let gk = g[k] + wd * data[k];
                        m[k] = mu * m[k] + gk;
                        data[k] -= lr * m[k];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, e) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                    let c1 = T::one() - T::lit(beta1.powi(self.step as i32));
                    let c2 = T::one() - T::lit(beta2.powi(self.step as i32));
                    for k in 0..data.len() {
                        let gk = g[k] + wd * data[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * gk;
                        v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        data[k] -= lr * mh / (vh.sqrt() + e);
                    }
                }
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "optimizer_step" });
            }
        }
        Ok(())
    }
}
