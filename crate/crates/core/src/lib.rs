//! Simulation of iterative model fitting on accumulating real and synthetic
//! data.
//!
//! A workflow fits an estimator on a weighted corpus, samples fresh
//! features, draws synthetic responses from the fitted model and appends
//! them to the corpus. The [`workflow`] module runs that loop at finite
//! sample size; [`limitproc`] simulates its large-sample Gaussian limit; the
//! two are compared through [`metrics`], and [`verify`] checks the
//! likelihood-ratio identity behind the limit.

pub mod error;
pub mod estimation;
pub mod expfam;
pub mod linalg;
pub mod limitproc;
pub mod metrics;
pub mod rng;
pub mod stats;
pub mod verify;
pub mod workflow;

pub use error::{Error, Result};
