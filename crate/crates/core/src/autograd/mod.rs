//! Minimal differentiable computation core: tensors, a reverse-mode tape,
//! parameter storage, seeded streams and the ADAM optimizer.

mod adam;
mod graph;
pub mod rng;
mod store;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{conv_out_len, sigmoid, softplus_beta, Gradients, Graph, Var, MASK_NEG};
pub use store::{BoundParams, ParamStore};
pub use tensor::Tensor;
