//! Diffusion factor models for high-dimensional asset returns.
//!
//! The library trains a factor-structured score network on return panels via
//! denoising score matching, generates new return samples by integrating the
//! learned reverse SDE, recovers the latent factor subspace from the generated
//! data, and feeds generated moments into shrinkage-aware portfolio rules and
//! backtests.
//!
//! Module map:
//! - [`linalg`]: dense symmetric eigensolver, QR orthonormalization, SPD solves
//! - [`diffusion`]: schedules, factor models, projection geometry, score oracles
//! - [`score_net`]: the structured encoder/decoder score network and its exact gradients
//! - [`trainer`]: the denoising score-matching training loop
//! - [`sampler`]: synthetic panel simulation and reverse-SDE sampling
//! - [`estimation`]: sample moments, top-k subspace extraction, relative-error metrics
//! - [`portfolio`]: shrinkage estimators, norm-constrained mean-variance weights,
//!   factor extraction, and backtest metrics
//! - [`panel`]: the dated return-panel container with CSV I/O

pub mod diffusion;
pub mod error;
pub mod estimation;
pub mod linalg;
pub mod panel;
pub mod portfolio;
pub mod rng;
pub mod sampler;
pub mod score_net;
pub mod trainer;

pub use error::{DfmError, Result};
pub use linalg::{EigenPair, Mat};
pub use panel::ReturnPanel;
