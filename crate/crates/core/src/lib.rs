//! Adaptive cross-Hadamard feature expansion: channel selection with a
//! Gumbel top-k estimator, pairwise Hadamard products, dynamic
//! normalisation, a parallel kernel dispatcher and an analytic cost model.

// `!(x >= lo)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ach;
pub mod arch;
pub mod autodiff;
pub mod cost;
pub mod demo;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod normalization;
pub mod pairing;
pub mod sampling;
pub mod scheduler;
pub mod tensor;

pub use ach::{AchConfig, AchLayer, AchOutput, AdaptiveBottleneck, FrozenSelection, GhostModule, SelectPath};
pub use arch::{ArchSpec, BottleneckSpec, Expansion, LayerSpec};
pub use autodiff::{CurveKind, Gradients, ParamId, ParamSet, Tape, Var};
pub use error::{Error, Result};
pub use nn::Mode;
pub use pairing::{BlockAssignment, PairMap};
pub use sampling::{AnnealKind, AnnealSchedule, SelectionState};
pub use tensor::{DType, Scalar, Tensor};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
