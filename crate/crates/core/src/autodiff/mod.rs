//! Reverse-mode differentiation over the small layer set the baselines need:
//! 3×3 convolution, batch normalization, ReLU, elementwise addition, and
//! fused scalar losses.

pub mod conv;
mod gradcheck;
mod graph;
pub mod norm;

pub use gradcheck::{grad_check, grad_check_at};
pub use graph::{Eager, Gradients, Graph, Tape, Var};
pub use norm::{BatchMoments, BnMode, RunningStats, BN_EPSILON, BN_MOMENTUM};
