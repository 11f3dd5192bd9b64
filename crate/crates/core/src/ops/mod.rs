//! Forward and backward kernels for every layer type the networks use.

mod basic;
mod bn;
mod conv;
mod grad_check;
mod loss;
mod sgd;

pub use basic::*;
pub use bn::*;
pub use conv::*;
pub use grad_check::*;
pub use loss::*;
pub use sgd::*;
