//! Dense tensors with a small reverse-mode autodiff tape.
//!
//! Training code builds a fresh [`Tape`] per step, binds parameter tensors
//! with [`Tape::param`], and calls [`Tape::backward`] on a scalar loss. The
//! returned [`Gradients`] are then accumulated into the tensors and consumed
//! by an [`Optimizer`].

pub mod conv;
pub mod error;
pub mod functional;
pub mod gradcheck;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use conv::{col2im_add, im2col, ConvGeom};
pub use error::{Result, TensorError};
pub use functional::{cross_entropy, kl_div, log_softmax_t, softmax_t};
pub use optim::{Optimizer, OptimizerKind};
pub use real::Real;
pub use rng::RngState;
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::{numel, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
