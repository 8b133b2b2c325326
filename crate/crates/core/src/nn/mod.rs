//! Minimal reverse-mode autodiff toolkit: dense tensors, a tape of
//! differentiable operations, the Adam optimizer, and a versioned
//! on-disk weights container.

pub mod adam;
pub mod store;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use store::{load_weights, save_weights, LoadedWeights};
pub use tape::{sigmoid, softplus, NodeId, Tape};
pub use tensor::Tensor;
