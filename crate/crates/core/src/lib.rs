//! Point-cloud correspondence search by diffusion over relaxed
//! doubly-stochastic matching matrices.
//!
//! The crate bundles a small reverse-mode tape ([`tensor`]), Sinkhorn
//! projection ([`dsm`]), the noise schedule and DDIM update ([`schedule`]),
//! rigid geometry ([`geometry`]), the denoising network ([`denoiser`]) with a
//! lightweight feature encoder ([`encoder`]), training and sampling loops
//! ([`pipeline`]), evaluation ([`metrics`]) and synthetic data ([`data`]).

pub mod config;
pub mod data;
pub mod denoiser;
pub mod dsm;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
