//! QoS mechanisms the controller can apply to a call, and how they act on
//! the simulated network.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{
    Discipline, DropProfile, FecConfig, FlowId, NetsimError, RedParams, ServiceClass, SimWorld, WredParams,
};

/// Buffer change per application of a buffer action (packets).
pub const BUFFER_STEP_PKTS: usize = 15;
/// Token-bucket depth used for Guaranteed reservations (packets).
pub const GUARANTEED_BUCKET_PKTS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error("{action} is infeasible: {reason}")]
    Infeasible { action: String, reason: String },
    #[error(transparent)]
    Network(#[from] NetsimError),
}

/// Parameter-free identity of an action, used for conflicts and bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    IncreaseBuffer,
    DecreaseBuffer,
    EnableRed,
    EnableWred,
    EnableFec,
    ControlledLoad,
    GuaranteedLoad,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::IncreaseBuffer,
        ActionKind::DecreaseBuffer,
        ActionKind::EnableRed,
        ActionKind::EnableWred,
        ActionKind::EnableFec,
        ActionKind::ControlledLoad,
        ActionKind::GuaranteedLoad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::IncreaseBuffer => "increase_buffer",
            ActionKind::DecreaseBuffer => "decrease_buffer",
            ActionKind::EnableRed => "enable_red",
            ActionKind::EnableWred => "enable_wred",
            ActionKind::EnableFec => "enable_fec",
            ActionKind::ControlledLoad => "controlled_load",
            ActionKind::GuaranteedLoad => "guaranteed_load",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A QoS mechanism together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "params", rename_all = "snake_case")]
pub enum ActionId {
    IncreaseBuffer { step_pkts: usize },
    DecreaseBuffer { step_pkts: usize },
    EnableRed(RedParams),
    EnableWred(WredParams),
    EnableFec(FecConfig),
    ControlledLoad,
    GuaranteedLoad,
}

impl ActionId {
    pub fn kind(&self) -> ActionKind {
        match self {
            ActionId::IncreaseBuffer { .. } => ActionKind::IncreaseBuffer,
            ActionId::DecreaseBuffer { .. } => ActionKind::DecreaseBuffer,
            ActionId::EnableRed(_) => ActionKind::EnableRed,
            ActionId::EnableWred(_) => ActionKind::EnableWred,
            ActionId::EnableFec(_) => ActionKind::EnableFec,
            ActionId::ControlledLoad => ActionKind::ControlledLoad,
            ActionId::GuaranteedLoad => ActionKind::GuaranteedLoad,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().as_str()
    }

    pub fn increase_buffer() -> Self {
        ActionId::IncreaseBuffer {
            step_pkts: BUFFER_STEP_PKTS,
        }
    }

    pub fn decrease_buffer() -> Self {
        ActionId::DecreaseBuffer {
            step_pkts: BUFFER_STEP_PKTS,
        }
    }

    pub fn red() -> Self {
        ActionId::EnableRed(RedParams::default())
    }

    /// RED with a small gap between the thresholds.
    pub fn red_narrow() -> Self {
        ActionId::EnableRed(RedParams::new(20.0, 30.0, 0.1))
    }

    pub fn wred() -> Self {
        ActionId::EnableWred(WredParams::default())
    }

    pub fn fec() -> Self {
        ActionId::EnableFec(FecConfig::default())
    }

    /// One representative of every kind, with default parameters.
    pub fn catalog() -> Vec<ActionId> {
        vec![
            Self::increase_buffer(),
            Self::decrease_buffer(),
            Self::red(),
            Self::wred(),
            Self::fec(),
            ActionId::ControlledLoad,
            ActionId::GuaranteedLoad,
        ]
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        let bad = |reason: &str| ActionError::Infeasible {
            action: self.name().to_string(),
            reason: reason.to_string(),
        };
        match self {
            ActionId::IncreaseBuffer { step_pkts } | ActionId::DecreaseBuffer { step_pkts } if *step_pkts == 0 => {
                Err(bad("step must be at least one packet"))
            }
            ActionId::EnableRed(p) => Discipline::Red(*p).validate().map_err(Into::into),
            ActionId::EnableWred(p) => Discipline::Wred(p.clone()).validate().map_err(Into::into),
            ActionId::EnableFec(f) if !f.is_valid() => Err(bad("FEC needs k >= 1 and one parity")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionId::IncreaseBuffer { step_pkts } => write!(f, "increase_buffer(+{step_pkts})"),
            ActionId::DecreaseBuffer { step_pkts } => write!(f, "decrease_buffer(-{step_pkts})"),
            ActionId::EnableRed(p) => write!(f, "enable_red({}, {}, {})", p.min_th, p.max_th, p.max_p),
            ActionId::EnableWred(p) => {
                let profiles: Vec<String> = p
                    .profiles
                    .iter()
                    .map(|DropProfile { min_th, max_th, max_p }| format!("{min_th}/{max_th}/{max_p}"))
                    .collect();
                write!(f, "enable_wred({})", profiles.join(", "))
            }
            ActionId::EnableFec(c) => write!(f, "enable_fec(k={}, parity={})", c.block_k, c.parity_count),
            ActionId::ControlledLoad => f.write_str("controlled_load"),
            ActionId::GuaranteedLoad => f.write_str("guaranteed_load"),
        }
    }
}

/// Actions that must not be active together on one call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConflictSet {
    pub members: Vec<ActionKind>,
}

impl ConflictSet {
    pub fn new(members: impl IntoIterator<Item = ActionKind>) -> Self {
        let mut members: Vec<ActionKind> = members.into_iter().collect();
        members.sort();
        members.dedup();
        Self { members }
    }

    pub fn contains(&self, kind: ActionKind) -> bool {
        self.members.contains(&kind)
    }
}

pub fn default_conflicts() -> Vec<ConflictSet> {
    vec![
        ConflictSet::new([ActionKind::IncreaseBuffer, ActionKind::DecreaseBuffer]),
        ConflictSet::new([ActionKind::ControlledLoad, ActionKind::GuaranteedLoad]),
        ConflictSet::new([ActionKind::EnableRed, ActionKind::EnableWred]),
    ]
}

/// True iff some set holds both kinds. Never true for a kind and itself.
pub fn conflicts_in(sets: &[ConflictSet], a: ActionKind, b: ActionKind) -> bool {
    a != b && sets.iter().any(|s| s.contains(a) && s.contains(b))
}

pub fn conflicts(a: ActionKind, b: ActionKind) -> bool {
    conflicts_in(&default_conflicts(), a, b)
}

/// What an apply or stop did to the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEffect {
    pub action: ActionId,
    /// False when the call already was in the requested configuration.
    pub changed: bool,
    pub detail: String,
}

fn infeasible(action: &ActionId, reason: impl Into<String>) -> ActionError {
    ActionError::Infeasible {
        action: action.name().to_string(),
        reason: reason.into(),
    }
}

/// Reservation a call needs for Guaranteed service: its wire rate,
/// including parity overhead.
pub fn guaranteed_reservation_kbps(world: &SimWorld, flow: FlowId) -> Result<f64, NetsimError> {
    let cfg = world.media_config(flow)?;
    let wire = cfg.packet_bytes() as f64 * 8.0 / cfg.packet_interval_ms;
    let overhead = world.fec(flow)?.map_or(1.0, |f| f.overhead_factor());
    Ok(wire * overhead)
}

/// Whether the mechanism is currently in force for the call.
pub fn is_active(world: &SimWorld, flow: FlowId, kind: ActionKind) -> Result<bool, NetsimError> {
    Ok(match kind {
        ActionKind::IncreaseBuffer => world.buffer_delta(flow)? > 0,
        ActionKind::DecreaseBuffer => world.buffer_delta(flow)? < 0,
        ActionKind::EnableRed => matches!(world.flow_aqm(flow)?, Some(Discipline::Red(_))),
        ActionKind::EnableWred => matches!(world.flow_aqm(flow)?, Some(Discipline::Wred(_))),
        ActionKind::EnableFec => world.fec(flow)?.is_some(),
        ActionKind::ControlledLoad => world.service_class(flow)? == ServiceClass::ControlledLoad,
        ActionKind::GuaranteedLoad => matches!(world.service_class(flow)?, ServiceClass::Guaranteed { .. }),
    })
}

pub fn active_actions(world: &SimWorld, flow: FlowId) -> Result<Vec<ActionKind>, NetsimError> {
    let mut out = Vec::new();
    for kind in ActionKind::ALL {
        if is_active(world, flow, kind)? {
            out.push(kind);
        }
    }
    Ok(out)
}

/// Puts a mechanism into force for one call. A conflicting queue discipline
/// or service class of the same call is replaced.
pub fn apply_action(world: &mut SimWorld, flow: FlowId, action: &ActionId) -> Result<ActionEffect, ActionError> {
    action.validate()?;
    let effect = |changed: bool, detail: String| ActionEffect {
        action: action.clone(),
        changed,
        detail,
    };
    match action {
        ActionId::IncreaseBuffer { step_pkts } | ActionId::DecreaseBuffer { step_pkts } => {
            let sign = if matches!(action, ActionId::IncreaseBuffer { .. }) { 1 } else { -1 };
            let applied = world.adjust_buffer(flow, sign * *step_pkts as i64)?;
            if applied == 0 {
                return Err(infeasible(action, "buffer is at its limit"));
            }
            let size = world.base_buffer() as i64 + total_delta(world);
            Ok(effect(true, format!("buffer {applied:+} to {size} packets")))
        }
        ActionId::EnableRed(p) => {
            let d = Discipline::Red(*p);
            if world.flow_aqm(flow)? == Some(&d) {
                return Ok(effect(false, "RED already active".into()));
            }
            world.set_flow_aqm(flow, Some(d))?;
            Ok(effect(true, format!("RED min {} max {} max_p {}", p.min_th, p.max_th, p.max_p)))
        }
        ActionId::EnableWred(p) => {
            let d = Discipline::Wred(p.clone());
            if world.flow_aqm(flow)? == Some(&d) {
                return Ok(effect(false, "WRED already active".into()));
            }
            world.set_flow_aqm(flow, Some(d))?;
            Ok(effect(true, format!("WRED with {} profiles", p.profiles.len())))
        }
        ActionId::EnableFec(c) => {
            if world.fec(flow)? == Some(*c) {
                return Ok(effect(false, "FEC already active".into()));
            }
            world.set_fec(flow, Some(*c))?;
            // a reservation made without parity overhead would police parity
            if let ServiceClass::Guaranteed { bucket_depth_pkts, .. } = world.service_class(flow)? {
                let reserved_kbps = guaranteed_reservation_kbps(world, flow)?;
                if world
                    .configure_service_class(flow, ServiceClass::Guaranteed { reserved_kbps, bucket_depth_pkts })
                    .is_err()
                {
                    log::debug!("reservation of flow {flow} not resized for FEC overhead");
                }
            }
            Ok(effect(true, format!("FEC k={} parity={}", c.block_k, c.parity_count)))
        }
        ActionId::ControlledLoad => {
            if world.service_class(flow)? == ServiceClass::ControlledLoad {
                return Ok(effect(false, "controlled load already active".into()));
            }
            world.configure_service_class(flow, ServiceClass::ControlledLoad)?;
            Ok(effect(true, "controlled load service".into()))
        }
        ActionId::GuaranteedLoad => {
            if matches!(world.service_class(flow)?, ServiceClass::Guaranteed { .. }) {
                return Ok(effect(false, "guaranteed service already active".into()));
            }
            let reserved_kbps = guaranteed_reservation_kbps(world, flow)?;
            let class = ServiceClass::Guaranteed {
                reserved_kbps,
                bucket_depth_pkts: GUARANTEED_BUCKET_PKTS,
            };
            match world.configure_service_class(flow, class) {
                Ok(()) => Ok(effect(true, format!("guaranteed service reserving {reserved_kbps:.1} kbps"))),
                Err(NetsimError::AdmissionRefused {
                    requested_kbps,
                    available_kbps,
                }) => Err(infeasible(
                    action,
                    format!("admission refused ({requested_kbps:.1} kbps > {available_kbps:.1} kbps free)"),
                )),
                Err(e) => Err(e.into()),
            }
        }
    }
}

fn total_delta(world: &SimWorld) -> i64 {
    (0..world.media_count())
        .map(|i| world.buffer_delta(FlowId(i as u32)).unwrap_or(0))
        .sum()
}

/// Reverts a mechanism for one call. Stopping an inactive mechanism is a no-op.
pub fn stop_action(world: &mut SimWorld, flow: FlowId, kind: ActionKind) -> Result<ActionEffect, ActionError> {
    let action = match kind {
        ActionKind::IncreaseBuffer => ActionId::increase_buffer(),
        ActionKind::DecreaseBuffer => ActionId::decrease_buffer(),
        ActionKind::EnableRed => match world.flow_aqm(flow)? {
            Some(Discipline::Red(p)) => ActionId::EnableRed(*p),
            _ => ActionId::red(),
        },
        ActionKind::EnableWred => match world.flow_aqm(flow)? {
            Some(Discipline::Wred(p)) => ActionId::EnableWred(p.clone()),
            _ => ActionId::wred(),
        },
        ActionKind::EnableFec => ActionId::EnableFec(world.fec(flow)?.unwrap_or_default()),
        ActionKind::ControlledLoad => ActionId::ControlledLoad,
        ActionKind::GuaranteedLoad => ActionId::GuaranteedLoad,
    };
    if !is_active(world, flow, kind)? {
        return Ok(ActionEffect {
            action,
            changed: false,
            detail: format!("{kind} not active"),
        });
    }
    let detail = match kind {
        ActionKind::IncreaseBuffer | ActionKind::DecreaseBuffer => {
            let old = world.reset_buffer_delta(flow)?;
            format!("buffer share {old:+} released")
        }
        ActionKind::EnableRed | ActionKind::EnableWred => {
            world.set_flow_aqm(flow, None)?;
            format!("{kind} removed")
        }
        ActionKind::EnableFec => {
            world.set_fec(flow, None)?;
            "FEC off".to_string()
        }
        ActionKind::ControlledLoad | ActionKind::GuaranteedLoad => {
            let freed = world.service_class(flow)?.reserved_kbps();
            world.configure_service_class(flow, ServiceClass::BestEffort)?;
            if freed > 0.0 {
                format!("best effort, {freed:.1} kbps released")
            } else {
                "best effort".to_string()
            }
        }
    };
    Ok(ActionEffect {
        action,
        changed: true,
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{LinkConfig, MediaFlowConfig, QueueConfig, WorldConfig};

    fn world(capacity_kbps: f64, calls: usize) -> SimWorld {
        SimWorld::new(
            WorldConfig {
                link: LinkConfig {
                    latency_ms: 10.0,
                    loss_rate: 0.0,
                    capacity_kbps,
                },
                queue: QueueConfig::tail_drop(60),
                media: vec![MediaFlowConfig::default(); calls],
                background: vec![],
                timeline: vec![],
                record_trace: false,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn declared_conflicts() {
        assert!(conflicts(ActionKind::IncreaseBuffer, ActionKind::DecreaseBuffer));
        assert!(conflicts(ActionKind::ControlledLoad, ActionKind::GuaranteedLoad));
        assert!(!conflicts(ActionKind::EnableFec, ActionKind::IncreaseBuffer));
    }

    #[test]
    fn conflicts_symmetric_and_irreflexive() {
        for a in ActionKind::ALL {
            assert!(!conflicts(a, a));
            for b in ActionKind::ALL {
                assert_eq!(conflicts(a, b), conflicts(b, a));
            }
        }
    }

    #[test]
    fn buffer_steps_move_by_fifteen() {
        let mut w = world(1000.0, 1);
        apply_action(&mut w, FlowId(0), &ActionId::decrease_buffer()).unwrap();
        assert_eq!(w.effective_queue_config().capacity_pkts, 45);
        apply_action(&mut w, FlowId(0), &ActionId::decrease_buffer()).unwrap();
        assert_eq!(w.effective_queue_config().capacity_pkts, 30);
    }

    #[test]
    fn buffer_at_limit_is_infeasible() {
        let mut w = world(1000.0, 1);
        for _ in 0..3 {
            apply_action(&mut w, FlowId(0), &ActionId::decrease_buffer()).unwrap();
        }
        assert_eq!(w.effective_queue_config().capacity_pkts, 15);
        apply_action(&mut w, FlowId(0), &ActionId::decrease_buffer()).unwrap();
        assert_eq!(w.effective_queue_config().capacity_pkts, 10);
        let err = apply_action(&mut w, FlowId(0), &ActionId::decrease_buffer()).unwrap_err();
        assert!(matches!(err, ActionError::Infeasible { .. }));
    }

    #[test]
    fn red_replaces_wred() {
        let mut w = world(1000.0, 1);
        apply_action(&mut w, FlowId(0), &ActionId::wred()).unwrap();
        apply_action(&mut w, FlowId(0), &ActionId::red()).unwrap();
        assert!(is_active(&w, FlowId(0), ActionKind::EnableRed).unwrap());
        assert!(!is_active(&w, FlowId(0), ActionKind::EnableWred).unwrap());
    }

    #[test]
    fn second_application_is_noop() {
        let mut w = world(1000.0, 1);
        assert!(apply_action(&mut w, FlowId(0), &ActionId::ControlledLoad).unwrap().changed);
        assert!(!apply_action(&mut w, FlowId(0), &ActionId::ControlledLoad).unwrap().changed);
    }

    #[test]
    fn stop_inactive_is_noop() {
        let mut w = world(1000.0, 1);
        let e = stop_action(&mut w, FlowId(0), ActionKind::GuaranteedLoad).unwrap();
        assert!(!e.changed);
    }

    #[test]
    fn stopping_guaranteed_releases_reservation() {
        let mut w = world(1000.0, 1);
        let before = w.headroom_kbps();
        apply_action(&mut w, FlowId(0), &ActionId::GuaranteedLoad).unwrap();
        let reserved = guaranteed_reservation_kbps(&w, FlowId(0)).unwrap();
        assert!((w.headroom_kbps() - (before - reserved)).abs() < 1e-9);
        stop_action(&mut w, FlowId(0), ActionKind::GuaranteedLoad).unwrap();
        assert!((w.headroom_kbps() - before).abs() < 1e-9);
    }

    #[test]
    fn action_json_shape() {
        let v = serde_json::to_value(ActionId::red()).unwrap();
        assert_eq!(v["action"], "enable_red");
        assert_eq!(v["params"]["max_th"], 100.0);
        let v = serde_json::to_value(ActionId::ControlledLoad).unwrap();
        assert_eq!(v, serde_json::json!({"action": "controlled_load"}));
        for a in ActionId::catalog() {
            let back: ActionId = serde_json::from_value(serde_json::to_value(&a).unwrap()).unwrap();
            assert_eq!(back, a);
        }
    }
}
