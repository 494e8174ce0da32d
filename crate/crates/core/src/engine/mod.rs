//! Double-precision (or generic float) tensors with tape-based reverse-mode
//! differentiation, plus the momentum SGD optimizer.

mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{sgd_momentum_step, MomentumState};
pub use tape::{Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::Tensor;

pub(crate) use kernels::top_k_indices;
