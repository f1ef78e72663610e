//! Sequential federated Bayesian estimation of incubation periods.
//!
//! Each site fits a model to its own data and passes on only a small
//! posterior artifact (truncated-normal summaries or a multivariate-normal
//! approximation), which parametrizes the priors of the next site.

pub mod dataio;
pub mod distributions;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod models;
pub mod numfmt;
pub mod sampler;

pub use error::{Error, Result};
