//! Semi-autoregressive sequence generation by block flow matching, exercised
//! on a synthetic latent-song task.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`synthdata`] — synthetic latent-song corpus with exact decoding oracles,
//!   EOP padding, and preference scoring.
//! - [`backbone`] — the toy diffusion transformer: block attention mask,
//!   timestep tagging, training forward/backward, and block-level KV cache.
//! - [`flow`] — flow-matching math: interpolation, velocity targets, the
//!   block flow matching loss, and the Euler block sampler.
//! - [`repa`] — stochastic block representation-alignment loss against a
//!   frozen random teacher.
//! - [`trainer`] — batch assembly, AdamW, the training loop, checkpointing.
//! - [`generator`] — block-by-block cached generation with EOP stopping,
//!   plus the cached-vs-uncached benchmark.
//! - [`cppo`] — preference pair construction, cross-pair DPO, model merging.
//! - [`cli`] — command implementations (`data`, `train`, `generate`, `dpo`,
//!   `eval`, `ablate`, `bench`) shared by the binary and the test suite.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod cppo;
pub mod error;
pub mod flow;
pub mod generator;
pub mod plots;
pub mod repa;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
