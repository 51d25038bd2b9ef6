//! Parameter storage, forward sessions and the convolutional building blocks.

mod layers;
mod params;
mod session;

pub use layers::{BatchNorm, Conv, ConvBnRelu, DoubleConv};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use session::{BnUpdate, Session};
