//! Two-step, bootstrap bias-adjusted quantile regression for clustered data.
//!
//! The crate fits conditional quantile models with cluster-specific random
//! effects. A linear quantile mixed model (asymmetric Laplace working
//! likelihood, Gauss–Hermite quadrature) supplies predicted random effects;
//! a second, ordinary quantile regression with those predictions as offsets
//! gives the fixed-effect estimate, and a wild bootstrap removes its bias.
//!
//! Layout:
//! - [`data`]: clustered datasets and CSV ingestion
//! - [`qr`]: exact check-loss minimization and standard errors
//! - [`lqmm`]: working-model likelihood, fitting and random-effect prediction
//! - [`estimators`]: oracle, marginal, Canay, penalized, jackknife, two-step
//! - [`bootstrap`]: resampling schemes, bias adjustment, intervals
//! - [`simulation`]: data-generating processes and the Monte Carlo harness
//! - [`cli`]: the `clusterqr` command-line front end

pub mod bootstrap;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod lqmm;
pub mod optim;
pub mod qr;
pub mod rng;
pub mod simulation;

pub use data::{
    load_csv, validate, write_csv, ClusterBlock, ClusteredDataset, CsvSchema, Diagnostics,
    FixedEffects, QuantileLevel, RandomEffects,
};
pub use error::{Error, Result};
pub use rng::{Purpose, StreamKey};
