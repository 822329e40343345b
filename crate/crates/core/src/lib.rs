//! Numerical core for NatADiff-style adversarial diffusion sampling on
//! Gaussian-mixture worlds.
//!
//! Everything a large-scale diffusion attack estimates with pretrained
//! networks (noise predictions, class posteriors, classifier gradients) has
//! an exact closed-form counterpart on a labeled Gaussian mixture, so the
//! sampling, guidance, and evaluation machinery here can be tested against
//! analytic oracles instead of fixtures pulled from another codebase.
//!
//! Module map:
//!
//! - [`schedule`] — variance-preserving forward process, bridge resampling,
//!   deterministic reverse step
//! - [`world`] — labeled Gaussian mixture: sampling, noised scores, Bayes
//!   posteriors
//! - [`nn`] — small dense network with hand-rolled reverse-mode gradients
//! - [`predictor`] — the noise-predictor interface plus the exact oracle
//! - [`denoiser`] — trainable conditional noise-prediction network
//! - [`victims`] — victim classifiers, PGD, adversarial training
//! - [`guidance`] — classifier-free / boundary guidance and the adversarial
//!   classifier gradient
//! - [`attack`] — the full guided sampling loops, similarity targeting,
//!   purification
//! - [`eval`] — ASR variants, Fréchet distance, entropy score, ablation
//!   protocols
//! - [`config`] — structured-text configuration and world files

pub mod attack;
pub mod config;
pub mod denoiser;
pub mod eval;
pub mod guidance;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod schedule;
pub mod victims;
pub mod world;

pub use nalgebra::{DMatrix, DVector};
