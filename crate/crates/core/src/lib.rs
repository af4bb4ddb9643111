//! Variance-reduced stochastic optimization on clustered data.
//!
//! The crate provides
//!
//! * [`optim`]: SGD, Momentum, QHM, IGT, Adam and the multi-momentum
//!   Discover family (Discover, Discover-QHM, Discover-IGT), all behind one
//!   two-phase stepping interface;
//! * [`problems`]: synthetic clustered objectives (quadratic with exact
//!   constants, softmax regression with label noise);
//! * [`metrics`] and [`theory`]: gradient-noise estimators, variance
//!   decompositions and convergence bounds;
//! * [`engine`]: the deterministic, optionally sharded training loop.

pub mod cluster;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod problems;
pub mod rng;
pub mod theory;
pub mod vector;

pub use cluster::{BatchGradients, BatchItem, ClusterId, ClusterSpec, GradResponse, MiniBatch};
pub use error::{Error, Result};
pub use rng::{Purpose, RngStream};
pub use vector::ParamVector;
