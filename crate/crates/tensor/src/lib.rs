//! Dense `f32` tensors and a define-by-run reverse-mode tape.
//!
//! Values live in [`Tensor`]; a forward pass records primitives on a
//! [`Tape`], addressed through [`Var`] handles. Trainable weights live in a
//! [`ParamStore`] outside the tape and are copied in as leaves on every pass,
//! so a tape can be discarded after `backward` once gradients have been
//! flushed back with [`Tape::accumulate_param_grads`].
//!
//! Every kernel sums in a fixed order, so identical inputs give bit-identical
//! outputs and gradients.

mod error;
pub mod kernels;
mod optim;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::Adam;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
