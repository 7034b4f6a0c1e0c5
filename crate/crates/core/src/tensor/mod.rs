//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! [`Tape::detach`] is the stop-gradient barrier used to confine each loss to
//! its own branch during guided training.

mod adam;
mod param;
mod tape;
mod value;

pub use adam::{adam_update, Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{pooled_len, Gradients, Pad2d, Primitive, Tape, Var};
pub use value::Tensor;
