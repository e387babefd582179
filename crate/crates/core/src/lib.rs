//! Bias identification and mitigation for conditional diffusion models at
//! desk scale.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`embedding`]: pooled prompt embeddings, similarity measures and the
//!   `EMBD` interchange format
//! - [`calibration`]: the closed-form calibrated projection
//! - [`gate`]: skew scoring, the bias identification gate, accuracy and λ
//!   sweeps
//! - [`synthetic`]: embedding worlds with planted spurious directions
//! - [`adapter`]: cross-attention with per-expert low-rank bias adapters
//! - [`diffusion`]: a toy conditional denoiser, bias fine-tuning and sampling
//! - [`moe`]: fixed-weight expert routing and gated generation
//! - [`fairness`]: statistical parity scoring of labelled generations
//! - [`demo`]: the whole toy pipeline end to end
//! - [`cli`]: the `moesd` command-line front end

pub mod adapter;
pub mod calibration;
pub mod cli;
mod codec;
pub mod demo;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod fairness;
pub mod gate;
pub mod moe;
pub mod synthetic;

pub use error::{Error, FormatError, Result};
