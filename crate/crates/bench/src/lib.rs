//! Benchmark fixtures shared by the criterion targets.

use qosearch_core::actions::ActionId;
use qosearch_core::knowledge::{HEstimate, KnowledgeBase, ScenarioCase};
use qosearch_core::netsim::{FlowId, SimWorld};
use qosearch_core::harness::preset;

/// A world built from a preset, ready to advance.
pub fn preset_world(name: &str, seed: u64) -> SimWorld {
    let s = preset(name).expect("preset exists");
    SimWorld::new(s.world_config(false), seed).expect("valid preset")
}

/// A loss-case KB whose last action carries the best estimate.
pub fn skewed_kb() -> KnowledgeBase {
    let actions = vec![ActionId::increase_buffer(), ActionId::red(), ActionId::fec(), ActionId::ControlledLoad];
    KnowledgeBase::seeded(vec![(ScenarioCase::Case2, actions)], |_, a| match a {
        ActionId::ControlledLoad => HEstimate::new(40.0, 0.0),
        _ => HEstimate::new(250.0, 0.1),
    })
    .expect("distinct actions")
}

pub const FLOW: FlowId = FlowId(0);
