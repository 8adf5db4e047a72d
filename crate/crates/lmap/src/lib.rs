//! Latent macro-action planning over offline trajectory data.
//!
//! The pipeline has three stages:
//!
//! 1. [`trajectory`] turns raw episodes into return-to-go annotated macro
//!    tokens and two-token chunks, with normalization and an on-disk format.
//! 2. [`codec`] learns a state-conditioned vector-quantized autoencoder over
//!    chunks and [`prior`] fits an autoregressive model over the resulting
//!    latent codes (neural or exact tabular backend).
//! 3. [`plangraph`] pre-builds a latent search tree from the frozen models
//!    and [`mcts`] searches it with UCT/pUCT, progressive widening and
//!    parallel expansion, returning the first primitive action of the chosen
//!    macro (polling control).
//!
//! [`envs`] provides desk-scale stochastic environments and dataset
//! generation; [`harness`] wires everything into the `lmap` CLI. Runnable
//! walkthroughs for each capability live in `examples/`.

pub mod codec;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mcts;
pub mod nn;
pub mod plangraph;
pub mod prior;
pub mod rng;
pub mod trajectory;

pub use error::{Error, Result};
