//! Dynamic K-NN sparse attention segmentation networks on a small
//! reverse-mode autodiff engine.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod csp;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod profile;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
