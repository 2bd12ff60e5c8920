//! Synchronous simulation engine, experiment campaign runner, and trace
//! persistence.

mod config;
mod runner;
mod trace;

pub use config::{AgentSpec, ExperimentConfig, GraphSpec, InitSpec};
pub use runner::{
    build_backend, repeat_seed, run_experiment, run_simulation, run_simulation_with_backend,
    ExperimentOutcome, MAX_CONSECUTIVE_FAILED_ROUNDS,
};
pub use trace::{
    load_trace, persist_trace, DecisionRecord, DecisionSource, PromptRecord, RoundRecord,
    RunTrace, TraceHeader, TraceSummary, FORMAT_VERSION,
};
