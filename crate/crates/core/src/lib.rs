//! Lightweight attention hourglass networks for 2-D human pose estimation.

// Kernels index several parallel buffers by the same offset.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod annotations;
pub mod attention;
pub mod codec;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Result, TensorError};
pub use exec::{BnRefs, Eager, Exec};
pub use graph::{Gradients, Graph, Mode, Var};
pub use params::{ParamId, ParamStore, ParamTensor};
pub use tensor::{Dims, Tensor};
