//! Distributed symmetry-breaking benchmark harness.
//!
//! Simulates per-vertex agents (classical heuristics or LLM-backed) coloring
//! over-constrained graphs in synchronous rounds, computes Proximity and
//! Stability metrics over the conflict trajectories, and traces the evolution
//! of LLM strategy notes.

pub mod agent;
pub mod client;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod policies;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
