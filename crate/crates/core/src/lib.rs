//! VoIP quality control over a simulated network path.
//!
//! Calls are monitored in 5 s windows, their quality is scored with the
//! E-model, and a knowledge base of remedial actions is searched whenever
//! a call violates its delay, loss or MOS constraints.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actions;
pub mod controller;
pub mod harness;
pub mod knowledge;
pub mod metrics;
pub mod netsim;

pub use actions::{apply_action, stop_action, ActionId, ActionKind};
pub use controller::{Controller, ControllerConfig, ControllerOutput};
pub use harness::{load_scenario, run, Mode, RunArtifacts, RunOptions, Scenario};
pub use knowledge::{default_knowledge, KnowledgeBase, ScenarioCase};
pub use metrics::{estimate_mos, Constraints, HeuristicSample, QualityCategory};
pub use netsim::{FlowId, SimWorld};
