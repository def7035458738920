//! Numeric core of the RLPO concept-explanation loop: a procedural texture
//! world, a small classifier under test, concept activation vectors, a tiny
//! prompt-conditioned diffusion generator with low-rank adapters, diffusion
//! preference optimization, a DQN controller, seed-keyword selection and
//! evaluation metrics.

pub mod agent;
pub mod error;
pub mod evalx;
pub mod gen;
pub mod image;
pub mod nn;
pub mod prefopt;
pub mod probe;
pub mod rng;
pub mod seeds;
pub mod synthworld;
pub mod tcav;

pub use error::{Result, RlpoError};
pub use image::{Image, ImageBatch};
