//! Bernoulli percolation on random 2-lifts of finite graphs.
//!
//! The crate builds the switching model (a base graph plus one Bernoulli(q)
//! switching bit per edge), samples percolation on the resulting double
//! cover, and implements three couplings between lifted and base
//! percolation together with exact enumeration oracles and Monte Carlo
//! estimators for the critical curve `p_c(q)`.

pub mod cli;
pub mod enhancement;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod holder;
pub mod lift;
pub mod oracle;
pub mod perco;
pub mod rng;
pub mod scalar;
pub mod sharpness;
pub mod stats;

pub use error::{Error, Result};
pub use graph::{BaseGraph, GraphKind, Host};
pub use lift::{build_lift, GaugeSet, LiftedGraph, SwitchConfig};
pub use perco::PercolationConfig;
pub use rng::{MasterSeed, StreamRng};

/// Exact probabilities returned by the enumeration oracles.
pub type Exact = num_rational::BigRational;

/// Floating-point scalar used by the samplers and estimators.
pub type Real = f64;
