//! Soundness checks over a finished run.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{check_global, ControllerOutput, Entering, TransitionKind};
use crate::netsim::FlowId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("call {call}: {msg}")]
    Call { call: FlowId, msg: String },
    #[error("state {state}: {msg}")]
    State { state: u64, msg: String },
    #[error("episode of call {call} at {at_ms} ms: {msg}")]
    Episode { call: FlowId, at_ms: f64, msg: String },
    #[error("global record at {at_ms} ms: {msg}")]
    Global { at_ms: f64, msg: String },
}

/// Checks state ordering, transition kinds, that actions were only applied
/// to violating states, that episodes followed their snapshotted order and
/// that the global means match the per-call windows.
pub fn validate_run(out: &ControllerOutput) -> Result<(), ValidationError> {
    let specs: HashMap<FlowId, _> = out.calls.iter().map(|c| (c.flow, c)).collect();
    let mut by_call: BTreeMap<FlowId, Vec<_>> = BTreeMap::new();
    for s in &out.states {
        by_call.entry(s.call_id).or_default().push(s);
    }
    let mut entering_tr: HashMap<u64, Vec<_>> = HashMap::new();
    for t in &out.transitions {
        entering_tr.entry(t.to_state).or_default().push(t);
    }
    let states_by_id: HashMap<u64, _> = out.states.iter().map(|s| (s.state_id, s)).collect();

    for (call, states) in &mut by_call {
        let call = *call;
        let err = |msg: String| ValidationError::Call { call, msg };
        states.sort_by(|a, b| a.opened_at_ms.total_cmp(&b.opened_at_ms).then(a.state_id.cmp(&b.state_id)));
        if states.first().map(|s| s.entering) != Some(Entering::Start) {
            return Err(err("first state is not Start".into()));
        }
        if states.iter().filter(|s| s.entering == Entering::Start).count() != 1 {
            return Err(err("more than one Start state".into()));
        }
        let goals = states.iter().filter(|s| s.entering == Entering::Goal).count();
        if goals > 1 || (goals == 1 && states.last().map(|s| s.entering) != Some(Entering::Goal)) {
            return Err(err("Goal state is not unique and last".into()));
        }
        for w in states.windows(2) {
            match w[0].closed_at_ms {
                Some(c) if c == w[1].opened_at_ms && c >= w[0].opened_at_ms => {}
                _ => return Err(err(format!("states {} and {} overlap or leave a gap", w[0].state_id, w[1].state_id))),
            }
        }
        for s in states.iter().skip(1) {
            let serr = |msg: String| ValidationError::State { state: s.state_id, msg };
            let trs = entering_tr.get(&s.state_id).map(Vec::as_slice).unwrap_or(&[]);
            if trs.len() != 1 {
                return Err(serr(format!("{} entering transitions", trs.len())));
            }
            let t = trs[0];
            if t.kind.entering() != s.entering {
                return Err(serr("entering kind disagrees with its transition".into()));
            }
            let interior = s.entering != Entering::Goal;
            if interior && !matches!(t.kind, TransitionKind::Delta1 | TransitionKind::Delta2 | TransitionKind::Delta3) {
                return Err(serr("interior state not entered by a delta transition".into()));
            }
        }
    }
    for s in &out.states {
        if s.entering == Entering::Start && entering_tr.contains_key(&s.state_id) {
            return Err(ValidationError::State {
                state: s.state_id,
                msg: "Start state has an entering transition".into(),
            });
        }
    }

    // actions only on violating states
    for t in &out.transitions {
        if t.applied.is_none() {
            continue;
        }
        let from = states_by_id[&t.from_state];
        let spec = specs[&t.call_id];
        let ok = from.g_sample().is_some_and(|g| spec.constraints.satisfied_by(&g));
        if ok {
            return Err(ValidationError::State {
                state: from.state_id,
                msg: format!("{:?} applied while constraints held", t.applied),
            });
        }
    }

    // δ2/δ3 applications follow the order snapshotted at episode start
    for ep in &out.episodes {
        let err = |msg: String| ValidationError::Episode {
            call: ep.call_id,
            at_ms: ep.opened_at_ms,
            msg,
        };
        let mut last_pos: HashMap<_, usize> = HashMap::new();
        let mut seen = Vec::new();
        for a in &ep.applied {
            if a.repeat {
                if seen.last() != Some(&a.kind) {
                    return Err(err(format!("{} repeated out of turn", a.kind)));
                }
                continue;
            }
            if seen.contains(&a.kind) {
                return Err(err(format!("{} applied twice", a.kind)));
            }
            let order = ep.order.get(&a.case).map(Vec::as_slice).unwrap_or(&[]);
            let Some(pos) = order.iter().position(|k| *k == a.kind) else {
                return Err(err(format!("{} is not listed for {}", a.kind, a.case)));
            };
            if let Some(prev) = last_pos.get(&a.case) {
                if pos <= *prev {
                    return Err(err(format!("{} applied out of order for {}", a.kind, a.case)));
                }
            }
            last_pos.insert(a.case, pos);
            seen.push(a.kind);
        }
    }

    // global means against an independent fold over the windows
    let mut at: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for w in &out.windows {
        let spec = specs[&w.call_id];
        if w.at_ms < spec.end_ms {
            if let Some(g) = w.g {
                at.entry(w.at_ms.to_bits()).or_default().push((g, spec.weight));
            }
        }
    }
    for rec in &out.global {
        let err = |msg: String| ValidationError::Global { at_ms: rec.at_ms, msg };
        let samples = at.get(&rec.at_ms.to_bits()).cloned().unwrap_or_default();
        let Some(check) = check_global(&samples, &Default::default()) else {
            return Err(err("no call windows".into()));
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12);
        if samples.len() != rec.active_calls
            || !close(check.delay_ms, rec.check.delay_ms)
            || !close(check.loss, rec.check.loss)
            || !close(check.mos, rec.check.mos)
        {
            return Err(err("weighted means do not match the call windows".into()));
        }
    }
    Ok(())
}
