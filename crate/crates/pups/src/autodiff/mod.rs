//! Dense `f64` arrays with a reverse-mode tape, parameter storage, AdamW and
//! binary checkpoints.

pub mod checkpoint;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Neighbors, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
