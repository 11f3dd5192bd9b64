//! Layer-wise parameter reuse analysis for small convolutional networks.
//!
//! A pre-trained source model's parameters are judged reusable for a target
//! task by substituting one tensor at a time and measuring the Dice change
//! ([`probe`]), by comparing kernels with RMSE and by closed-form batch-norm
//! perturbation statistics ([`analytics`]). [`train`] runs the transfer
//! experiments that check the verdict.

pub mod analytics;
pub mod data;
pub mod error;
pub mod io;
pub mod nn;
pub mod ops;
pub mod par;
pub mod probe;
pub mod repro;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use nn::{build_model, Arch, Mode, Model, ParamKey, ParamKind};
pub use par::Exec;
pub use rng::Rng;
pub use tensor::{Tensor, Tensor64};
