//! Quality-aware calibration and fusion of forensic detector scores across
//! near-duplicate image instances.
//!
//! The crate is organized around the pipeline a single query goes through:
//!
//! - [`types`]: instance records and per-source query sets.
//! - [`calibration`]: quality-conditioned Gaussian model, its maximum-likelihood
//!   fit, corrected logits and fused decisions.
//! - [`baselines`]: ranking strategies and mean-logit aggregation used for comparison.
//! - [`metrics`]: balanced accuracy, negative log-likelihood and evaluation reports.
//! - [`sim`]: seeded degradation-tree simulator and synthetic observation model.
//! - [`io`]: dataset ingestion and serialization.
//! - [`cli`]: the command implementations behind the `quad` binary.

pub mod baselines;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
