//! Certified out-of-distribution detection at desk scale.
//!
//! Building blocks: randomized-smoothing confidence certificates
//! ([`smoothing`]), interval bound propagation for the in-distribution
//! discriminator ([`ibp`]), a one-shot diffusion denoiser ([`diffusion`]),
//! the joint classifier/discriminator detector ([`joint`]), adversarial
//! evaluation ([`attack`]) and the clean/guaranteed/adversarial metric suite
//! ([`metrics`]). [`experiment`] wires them into reproducible runs.

pub mod attack;
pub mod diffusion;
pub mod error;
pub mod experiment;
mod fsutil;
pub mod ibp;
pub mod joint;
pub mod metrics;
pub mod neuralnet;
pub mod numerics;
pub mod smoothing;
pub mod synthdata;

pub use error::{CheckpointError, Error, Result};
