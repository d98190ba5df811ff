pub mod engine;
pub mod error;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod quant;
pub mod tensor;
pub mod train;
pub mod transforms;
pub mod tune;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Graph, Layer, Source};
pub use kernels::{LayerKind, PoolParams, SpatialParams};
pub use tensor::{IntTensor, Tensor};
