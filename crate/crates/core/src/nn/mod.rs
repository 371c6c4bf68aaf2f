//! Minimal dense/convolutional network library with hand-written backprop.

pub mod layer;
pub mod network;
pub mod optim;
pub mod stack;
pub mod tensor;

pub use layer::{Layer, LayerGrad, LayerSpec};
pub use network::{argmax, Architecture, Network};
pub use optim::{AdamConfig, StackOptimizer};
pub use stack::Dropout;
pub use tensor::Activations;
