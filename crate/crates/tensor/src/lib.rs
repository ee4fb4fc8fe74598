//! Dense f32 tensors with define-by-run reverse-mode differentiation.
//!
//! The crate is deliberately small: a value type ([`Tensor`]), a tape that
//! records operations and replays them backward ([`Tape`]), a named
//! parameter store, a seeded generator whose state can be serialized, and a
//! finite-difference gradient checker.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mask;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, gradcheck_with, CoordCheck, GradCheckConfig, GradCheckReport};
pub use mask::Mask;
pub use params::{Param, ParamId, ParamStore};
pub use rng::{Rng, RngState, RNG_STATE_BYTES};
pub use tape::{gelu_scalar, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
