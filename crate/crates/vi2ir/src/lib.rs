//! Visible-to-infrared image translation toolkit.
//!
//! A supervised conditional-adversarial translation pipeline: a coarse-to-fine
//! generator (global backbone plus local enhancers fused by element-wise sum),
//! a bank of patch discriminators applied to an image pyramid, an adversarial
//! objective with a per-layer feature-matching term, and the surrounding
//! machinery (paired-dataset ingestion, seeded synthetic data, SSIM/PSNR and
//! mAP evaluation, an optional 2x super-resolution stage, deterministic
//! training with resumable checkpoints).
//!
//! Everything runs on the CPU in `f64`. Determinism is a hard contract: the
//! same seed, config, and data produce bit-identical parameters, losses, and
//! checkpoint files.

pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod superres;
pub mod training;

mod error;

pub use error::{Error, Result};
