//! Multi-view human mesh recovery by test-time adaptation.
//!
//! Each camera view carries a latent token decoded by a frozen linear head
//! into body-model parameters. A fused virtual view is initialized from
//! reliability-filtered per-joint averages, and both the tokens and the
//! virtual view are refined by gradient descent on reprojection,
//! cross-view consistency and regularization losses.

pub mod body;
pub mod camera;
pub mod config;
pub mod error;
pub mod fusion;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod prior;
pub mod rotation;
pub mod synth;

pub use error::{Error, Result};
