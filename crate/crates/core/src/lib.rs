//! Deterministic text-conditional diffusion inference with temporal attention
//! gating.
//!
//! A small DiT-style noise predictor is driven by DDIM, DPM-Solver++(2M) or
//! Euler samplers under classifier-free guidance. The gating controller caches
//! cross-attention outputs at a gate step and reuses them for the rest of the
//! trajectory (collapsing the two guidance branches into one pass), and
//! interval-caches self-attention during the early steps. Around it sit the
//! trajectory ablations, convergence measurements and an exact MAC model that
//! is checked against an instrumented counter.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod cost;
pub mod denoiser;
pub mod error;
pub mod exec;
pub mod guidance;
pub mod numkern;
pub mod pipeline;
pub mod scheduler;
pub mod tgate;

pub use error::{Error, Result};
