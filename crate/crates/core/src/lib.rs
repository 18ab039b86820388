//! Channel pruning driven by mask-gradient weight influence.
//!
//! An all-ones mask multiplied into every conv/linear filter turns
//! backpropagation into a per-weight influence estimator (`∂L/∂M = ∂L/∂W ⊙ W`).
//! A small learned kernel maps each channel's influence slab to a score, an
//! annealed sigmoid turns scores into a soft channel strategy, and a joint
//! loss steers that strategy towards a model-wide target before channels are
//! physically removed.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod controller;
pub mod data;
pub mod error;
pub mod influence;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
