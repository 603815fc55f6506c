//! Dense tensors with tape-based reverse-mode differentiation, Adam, and
//! parameter checkpoints.

mod adam;
pub mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
