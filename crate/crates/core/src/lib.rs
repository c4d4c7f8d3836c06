//! Multimodal latent generative model with an energy-based prior.
//!
//! The model couples `m` observation modalities through a shared latent
//! `z`. The prior over `z` is an exponentially tilted reference density
//! `p(z) ∝ exp(f(z))·p₀(z)`, sampled with short-run Langevin dynamics.
//! Inference uses a uniform mixture of per-modality Gaussian experts.
//!
//! Modules, bottom-up:
//! - [`tensor`]: dense blocks and a reverse-mode tape
//! - [`nets`]: generator, encoder and energy networks
//! - [`prior`]: reference densities, the tilted prior, partition estimates
//! - [`langevin`]: short-run chains
//! - [`moe`]: mixture-of-experts posterior
//! - [`trainer`]: objective, gradient estimators and the joint training loop
//! - [`data`]: synthetic paired-view datasets
//! - [`eval`]: classifiers and coherence metrics
//! - [`config`], [`checkpoint`], [`cli`]: experiment plumbing

pub mod error;
pub mod io;
pub mod rng;
pub mod tensor;
pub mod nets;
pub mod prior;
pub mod langevin;
pub mod moe;
pub mod data;
pub mod optim;
pub mod trainer;
pub mod eval;
pub mod config;
pub mod checkpoint;
pub mod cli;

pub use error::{Error, Result};
