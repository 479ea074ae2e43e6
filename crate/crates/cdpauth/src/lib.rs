//! Diffusion-based authentication of Copy Detection Patterns on a synthetic
//! two-printer channel model.
//!
//! The pipeline: [`synthcdp`] generates templates and simulates per-printer
//! print channels into a balanced six-class dataset; [`denoiser`] trains a
//! class- and image-conditioned noise predictor over the [`schedule`]'s
//! forward diffusion; [`classify`] attributes a probe to the printer class
//! whose conditioning best explains the injected noise and authenticates by
//! comparing against the expected printer; [`baselines`] provides NCC/SSIM
//! threshold authenticators for comparison; [`eval`] holds splits,
//! augmentation, metrics, and the experiment runners; [`codec`] is the
//! template-autoencoder reconstruction study.

pub mod baselines;
pub mod classify;
pub mod codec;
pub mod config;
pub mod container;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod img;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod synthcdp;

pub use error::{Error, Result};
