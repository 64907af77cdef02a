//! Reverse-mode automatic differentiation over an explicit, single-use tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! immutable once recorded; [`Tape::backward`] walks the nodes in reverse
//! insertion order (which is a topological order by construction) and
//! accumulates gradients into the [`ParamSet`] the parameters came from.

mod ops;
mod tape;

pub(crate) use ops::softmax_row;
pub use ops::{with_dynorm_sign_fault, BnBatchStats, CurveKind};
pub use tape::{Gradients, ParamId, ParamSet, Parameter, Tape, Var};
