//! Minimal differentiable toolkit: tape, weight-normalized dense layers,
//! residual blocks, Adam and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layers::{softplus_beta, Forward, ResidualBlock, WeightNormDense};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Matrix, Tape, Var};
