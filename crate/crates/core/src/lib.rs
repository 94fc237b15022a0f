//! Snow-aware detection toolkit: a small dense-tensor autodiff engine, the
//! Peak Act activation, an unsupervised snow-response CNN with snow coverage
//! rate (SCR) grading, and the Cross Fusion feature-aggregation block with an
//! FPN+PANet reference neck for structural comparisons.

pub mod act;
pub mod error;
pub mod fusion;
pub mod grading;
pub mod io;
pub mod scr;
pub mod tensor;

pub use act::ActivationKind;
pub use error::{Error, Result};
pub use grading::{BBox, DifficultyLevel, GradingPolicy};
pub use tensor::{ConvLayer, GradTape, Tensor, TensorId};
