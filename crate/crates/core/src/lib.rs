//! Core library for chaotic-field forecasting experiments.
//!
//! The crate covers the full pipeline: spectral utilities and reference
//! integrators for two chaotic systems, a binary trajectory container,
//! reverse-mode automatic differentiation in `f64`, a hierarchy of
//! latent-conditioned neural forecasters with two baselines, composite
//! training losses with epoch-indexed schedules, a truncated-BPTT
//! trainer, and a rollout evaluation harness.

pub mod autodiff;
pub mod baselines;
pub mod container;
pub mod datastore;
pub mod error;
pub mod evaluation;
pub mod ks;
pub mod l96;
pub mod latents;
pub mod losses;
pub mod params;
pub mod predictor;
pub mod presets;
pub mod recurrence;
pub mod seeding;
pub mod spectral;
pub mod trainer;

pub use error::{CoreError, Result};
