//! Flow-based language modeling over one-hot token encodings.
//!
//! Tokens are lifted to one-hot rows, a Gaussian-to-data linear interpolant
//! defines a probability-flow ODE, and a time-conditioned denoiser trained by
//! cross entropy gives its velocity. Flow maps distilled from that denoiser
//! jump across the ODE in one or a few evaluations.
//!
//! Module map:
//!
//! - [`numerics`]: tensors, reverse-mode tape, seeded RNG, gradient checks
//! - [`lang_repr`]: vocabularies, one-hot lift and argmax decoding
//! - [`interpolant`]: interpolant sampling, denoiser/velocity conversion, losses
//! - [`time_warp`]: decoding error rate and the time reparameterization built on it
//! - [`denoiser_net`]: AdaLN transformer denoiser and a tabular denoiser
//! - [`flm_train`]: Adam, warmup, and the denoiser training loop
//! - [`flowmap`]: flow-map parameterizations and both distillation stages
//! - [`sampler`]: Euler and flow-map samplers, autoguidance, trajectories
//! - [`toy_oracle`]: exact posterior denoiser, exact flows, factorized baseline
//! - [`eval`]: entropy, Self-BLEU, decoding error curves, total variation
//! - [`corpus`], [`checkpoint`], [`config`], [`cli`]: data, persistence and the command line

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod denoiser_net;
pub mod error;
pub mod eval;
pub mod flm_train;
pub mod flowmap;
pub mod interpolant;
pub mod lang_repr;
pub mod numerics;
pub mod sampler;
pub mod time_warp;
pub mod toy_oracle;

pub use error::{Error, Result};
