//! Dense 2-D arrays with reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;

pub use params::{accumulate, BoundParams, Grads, ParamStore};
pub use tape::{lse, sigmoid, PairRotation, Tape, Var};
