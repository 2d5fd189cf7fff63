use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::presets::preset;
use super::{HarnessError, Scenario};
use crate::actions::{apply_action, ActionError};
use crate::knowledge::{standard_order, HEstimate, KnowledgeBase, ScenarioCase};
use crate::metrics::QualityCategory;
use crate::netsim::{FlowId, SimWorld};

/// Seed used to build the bundled knowledge base.
pub const CALIBRATION_SEED: u64 = 20_240_601;

const WARMUP_MS: f64 = 20_000.0;

/// One measured (case, action) estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub case: ScenarioCase,
    pub rank: u32,
    pub action: String,
    pub applied: bool,
    pub delay_ms: f64,
    pub loss: f64,
    pub mos: f64,
    pub category: QualityCategory,
    pub penalty: f64,
}

impl CalibrationRow {
    pub const HEADER: &'static [&'static str] = &[
        "case", "rank", "action", "applied", "delay_ms", "loss", "mos", "category", "penalty",
    ];
}

/// The preset each case is measured on.
pub fn calibration_scenario(case: ScenarioCase) -> Scenario {
    let name = match case {
        ScenarioCase::Case1 => "table1-s2",
        ScenarioCase::Case2 => "table1-s4",
        ScenarioCase::Case3 => "table1-s1",
        ScenarioCase::Case4 => "table1-s3",
    };
    preset(name).expect("calibration preset exists")
}

/// Measures every catalogued action on its case's scenario and returns a
/// knowledge base ranked in the standard order with measured estimates.
pub fn calibrate(seed: u64) -> Result<(KnowledgeBase, Vec<CalibrationRow>), HarnessError> {
    let mut rows = Vec::new();
    let mut measured = Vec::new();
    for (case, actions) in standard_order() {
        let scenario = calibration_scenario(case);
        let end_ms = scenario.duration_s * 1000.0;
        for (i, action) in actions.iter().enumerate() {
            let mut world = SimWorld::new(scenario.world_config(false), seed)?;
            let flow = FlowId(0);
            world.advance(WARMUP_MS);
            world.measure(flow)?;
            let applied = match apply_action(&mut world, flow, action) {
                Ok(_) => true,
                Err(ActionError::Infeasible { reason, .. }) => {
                    warn!("calibration {case}: {action} infeasible ({reason})");
                    false
                }
                Err(ActionError::Network(e)) => return Err(e.into()),
            };
            world.advance(end_ms);
            let s = world.measure(flow)?.ok_or_else(|| HarnessError::Invalid {
                field: "calibration".into(),
                msg: format!("no packets measured for {case} / {action}"),
            })?;
            let h = HEstimate::new(s.delay_ms, s.loss);
            info!("calibration {case}: {action} -> {:.1} ms, {:.4}", s.delay_ms, s.loss);
            rows.push(CalibrationRow {
                case,
                rank: i as u32 + 1,
                action: action.name().to_string(),
                applied,
                delay_ms: s.delay_ms,
                loss: s.loss,
                mos: s.mos,
                category: h.category(),
                penalty: h.penalty(),
            });
            measured.push((case, action.kind(), h));
        }
    }
    let kb = KnowledgeBase::seeded(standard_order(), |case, a| {
        measured
            .iter()
            .find(|(c, k, _)| *c == case && *k == a.kind())
            .map(|m| m.2)
            .expect("every action was measured")
    })?;
    Ok((kb, rows))
}
