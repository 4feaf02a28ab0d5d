//! Minimal neural-network engine: tensors, a reverse-mode tape, resampling
//! operators and named parameter stores.

pub mod graph;
pub mod layers;
pub mod params;
pub mod resample;
pub mod tensor;

pub use graph::{Graph, Var};
pub use params::{ParamStore, Params};
pub use resample::{Interp, SparseMap};
pub use tensor::{Scalar, Tensor};
