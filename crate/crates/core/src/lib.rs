//! Dense tensors with a gradient tape, cross-modal spatial attention with
//! spatial re-assembly, channel-wise modality aggregation, and crowd-count
//! metrics.

pub mod attention;
pub mod cfa;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{Module, Param, ParamId};
pub use scalar::{DType, Scalar};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
