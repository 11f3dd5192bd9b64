//! The two miniature architectures and their parameter addressing.

mod key;
mod model;

pub use key::{ParamKey, ParamKind};
pub use model::{build_model, Arch, ConvLayer, ConvMeta, LayerRole, Mode, Model, Tape, CLASS_COUNT, IN_CHANNELS};
