//! Collect, reflect and refine: guided diffusion sampling on an analytic
//! Gaussian-mixture problem.
//!
//! The ground-truth data distribution is an isotropic Gaussian mixture, so the
//! exact score and ε-prediction are available in closed form at every noise
//! level. Everything trained here (the base denoiser, the low-capacity weak
//! model with per-step low-rank experts) can be measured against that oracle.
//!
//! Pipeline stages:
//!
//! - [`denoiser`]: train a small ε-prediction network with conditioning dropout
//!   so it supports classifier-free guidance.
//! - [`collect`]: run guided DDIM trajectories and store both guidance branches
//!   per step, with conditioning embeddings compressed by truncated SVD.
//! - [`reflect`]: fit the weak model `(ε_uncond, c, t) -> ε_cond` from the stored
//!   records alone.
//! - [`refine`]: sample with slow (weak-to-strong guided) and fast (weak only)
//!   steps, plus the zigzag variant built on DDIM inversion.
//! - [`theory`]: synthetic weak/strong estimator pairs and the closed-form
//!   optimal guidance scale.
//! - [`eval`]: oracle-partitioned error, sliced Wasserstein distance, spectra of
//!   guidance directions and the quality-vs-cost sweep.

pub mod collect;
pub mod denoiser;
mod error;
pub mod eval;
pub mod gmm;
pub mod nn;
pub mod refine;
pub mod reflect;
pub mod rng;
pub mod schedule;
pub mod theory;

pub use error::{Error, Result};
pub use gmm::{Gmm, LabeledSample, MixtureSpec};
pub use schedule::NoiseSchedule;
