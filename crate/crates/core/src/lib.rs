//! Conformer RNN-T reprogramming.
//!
//! A frozen conformer transducer is adapted to new synthetic languages by
//! small trainable modules (input and latent reprogramming, residual adapters,
//! bias-only tuning, layer freezing), with the supporting autodiff engine,
//! transducer loss, self-supervised objectives, synthetic corpus and
//! training harness.

pub mod conformer;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod params;
pub mod peft;
pub mod reprogram;
pub mod ssl;
pub mod tensor;
pub mod transducer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
