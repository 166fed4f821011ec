//! Multiscale stochastic temporal convolutional networks.
//!
//! A hierarchical variational autoencoder over sequences whose latent layers
//! run at successively downsampled rates, conditioned autoregressively through
//! causal Wavenet feature stacks and trained on the evidence lower bound with
//! linear free bits.

pub mod error;
pub mod gradcheck;
pub mod data;
pub mod distributions;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, ParameterStore, Scalar, Tensor, Var};
