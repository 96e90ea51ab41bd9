//! Uncertainty-guided program search over long contexts.
//!
//! K independent trajectories each explore a context held in a sandboxed
//! interpreter; their answers are grouped by self-consistency and the
//! winner inside the plurality group is chosen by the product of verbalized
//! confidence and trace length.

pub mod config;
pub mod datasets;
pub mod domain;
pub mod grading;
pub mod llm;
pub mod orchestrator;
pub mod runner;
pub mod sandbox;
pub mod uncertainty;
