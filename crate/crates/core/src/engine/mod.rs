//! Dense tensors and a tape-based reverse-mode differentiation engine
//! covering the layers a 2-D residual network needs.

mod gradcheck;
pub mod kernels;
mod optim;
mod param;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_refined, roundoff_bound, sample_coords, GradCheckReport};
pub use kernels::{Conv2dGeometry, PoolGeometry};
pub use optim::Sgd;
pub use param::{ParamKind, ParamStore, Parameter};
pub use real::Real;
pub use tape::{BatchNormState, Mode, Tape, Var};
pub use tensor::Tensor;
