//! Dense network substrate shared by the probe, the ε-net and the Q-network.

pub mod checkpoint;
pub mod lora;
pub mod matrix;
pub mod mlp;
pub mod optim;

pub use checkpoint::{Checkpoint, Dtype};
pub use lora::{AdapterGrad, Adapters, LoraAdapter};
pub use matrix::Matrix;
pub use mlp::{Activation, GradTarget, Gradients, Layer, MlpParams, Trace};
pub use optim::{optimizer_step, Algorithm, OptimizerConfig, OptimizerState};
