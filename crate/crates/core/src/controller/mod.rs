//! Closed-loop search over call states.
//!
//! Every call is a path of states. Network or heuristic changes open δ1
//! states, single-call QoS actions open δ2 states and multi-call
//! coordination opens δ3 states. The controller runs once per measurement
//! window, synchronously between simulator events.

mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{self, ActionError, ActionId, ActionKind};
use crate::knowledge::{detect_case, HEstimate, KnowledgeBase, KnowledgeError, RefineStep, ScenarioCase};
use crate::metrics::{classify, update_window, Constraints, HeuristicSample, QualityCategory, WindowStats};
use crate::netsim::{FiredChange, FlowId, NetsimError, SimWorld, MAX_BUFFER_PKTS, MIN_BUFFER_PKTS};

pub use validate::{validate_run, ValidationError};

/// Weight given to emergency calls in global means.
pub const EMERGENCY_WEIGHT: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Network(#[from] NetsimError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error("invalid controller configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entering {
    Start,
    Delta1,
    Delta2,
    Delta3,
    Goal,
}

impl Entering {
    pub fn as_str(self) -> &'static str {
        match self {
            Entering::Start => "start",
            Entering::Delta1 => "delta1",
            Entering::Delta2 => "delta2",
            Entering::Delta3 => "delta3",
            Entering::Goal => "goal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Entering::Start,
            Entering::Delta1,
            Entering::Delta2,
            Entering::Delta3,
            Entering::Goal,
        ]
        .into_iter()
        .find(|e| e.as_str() == s)
    }
}

impl fmt::Display for Entering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One node of a call's state space.
#[derive(Debug, Clone, PartialEq)]
pub struct CallState {
    pub state_id: u64,
    pub call_id: FlowId,
    pub opened_at_ms: f64,
    pub closed_at_ms: Option<f64>,
    pub entering: Entering,
    pub g: WindowStats,
    /// Most recent window sample absorbed by the state.
    pub sample: Option<HeuristicSample>,
    pub category: Option<QualityCategory>,
    opening: Option<HeuristicSample>,
}

impl CallState {
    fn new(state_id: u64, call_id: FlowId, at_ms: f64, entering: Entering, window_s: f64) -> Self {
        Self {
            state_id,
            call_id,
            opened_at_ms: at_ms,
            closed_at_ms: None,
            entering,
            g: WindowStats::new(window_s),
            sample: None,
            category: None,
            opening: None,
        }
    }

    /// The g metric as a sample (MOS from the mean delay and loss).
    pub fn g_sample(&self) -> Option<HeuristicSample> {
        self.g.sample()
    }

    fn absorb(&mut self, s: HeuristicSample) {
        self.g = update_window(self.g, s.delay_ms, s.loss);
        self.sample = Some(s);
        self.opening.get_or_insert(s);
        self.category = self.g.sample().map(|g| classify(&g));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionKind {
    Delta1,
    Delta2,
    Delta3,
    Goal,
}

impl TransitionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransitionKind::Delta1 => "delta1",
            TransitionKind::Delta2 => "delta2",
            TransitionKind::Delta3 => "delta3",
            TransitionKind::Goal => "goal",
        }
    }

    pub fn entering(self) -> Entering {
        match self {
            TransitionKind::Delta1 => Entering::Delta1,
            TransitionKind::Delta2 => Entering::Delta2,
            TransitionKind::Delta3 => Entering::Delta3,
            TransitionKind::Goal => Entering::Goal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    NetworkChange,
    HeuristicChange,
    Action,
    Coordination,
    CallEnd,
}

impl Cause {
    pub fn as_str(self) -> &'static str {
        match self {
            Cause::NetworkChange => "network_change",
            Cause::HeuristicChange => "heuristic_change",
            Cause::Action => "action",
            Cause::Coordination => "coordination",
            Cause::CallEnd => "call_end",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub from_state: u64,
    pub to_state: u64,
    pub call_id: FlowId,
    pub kind: TransitionKind,
    pub cause: Cause,
    pub at_ms: f64,
    /// Action applied by this transition, if any.
    pub applied: Option<ActionKind>,
    /// Actions stopped by this transition.
    pub stopped: Vec<ActionKind>,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStatus {
    Accepted,
    Degraded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeOutcome {
    Open,
    Satisfied,
    Interrupted,
    CallEnded,
}

/// An action applied during an episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppliedAction {
    pub kind: ActionKind,
    pub case: ScenarioCase,
    pub at_ms: f64,
    pub coordinated: bool,
    pub repeat: bool,
}

#[derive(Debug, Clone)]
struct Pending {
    action: ActionId,
    case: ScenarioCase,
    before: HeuristicSample,
}

/// From the first violating window to the first satisfying one.
#[derive(Debug, Clone, Serialize)]
pub struct Episode {
    pub call_id: FlowId,
    pub opened_at_ms: f64,
    pub closed_at_ms: Option<f64>,
    pub outcome: EpisodeOutcome,
    pub applied: Vec<AppliedAction>,
    /// Kinds given up on because they could not be applied.
    pub infeasible: Vec<ActionKind>,
    /// Per-case selection order snapshotted at the episode start.
    pub order: BTreeMap<ScenarioCase, Vec<ActionKind>>,
    /// Per-case rank order snapshotted at the episode start.
    pub ranks: BTreeMap<ScenarioCase, Vec<ActionKind>>,
    pub exhausted: bool,
    pub coordinated: bool,
    pub refined: Vec<String>,
    #[serde(skip)]
    order_actions: BTreeMap<ScenarioCase, Vec<ActionId>>,
    #[serde(skip)]
    tried: Vec<ActionKind>,
    #[serde(skip)]
    pending: Option<Pending>,
}

impl Episode {
    pub fn time_to_satisfaction_ms(&self) -> Option<f64> {
        match (self.outcome, self.closed_at_ms) {
            (EpisodeOutcome::Satisfied, Some(end)) => Some(end - self.opened_at_ms),
            _ => None,
        }
    }

    pub fn final_action(&self) -> Option<ActionKind> {
        self.applied.last().map(|a| a.kind)
    }
}

/// What the harness tells the controller about one call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallSpec {
    pub flow: FlowId,
    pub constraints: Constraints,
    pub weight: f64,
    pub start_ms: f64,
    pub end_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Call {
    pub spec: CallSpec,
    pub states: Vec<CallState>,
    pub status: CallStatus,
    episode: Option<Episode>,
    drift: u32,
    finished: bool,
}

impl Call {
    pub fn id(&self) -> FlowId {
        self.spec.flow
    }

    pub fn current(&self) -> Option<&CallState> {
        self.states.last()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn is_active(&self) -> bool {
        !self.states.is_empty() && !self.finished
    }

    fn g(&self) -> Option<HeuristicSample> {
        self.current().and_then(|s| s.g_sample())
    }
}

/// Per-window record of one call (plot data).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub at_ms: f64,
    pub call_id: FlowId,
    pub sample: Option<HeuristicSample>,
    pub g: Option<HeuristicSample>,
    pub state_id: u64,
    pub satisfied: bool,
}

/// Weighted means over the active calls at one window boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalCheck {
    pub ok: bool,
    pub delay_ms: f64,
    pub loss: f64,
    pub mos: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalRecord {
    pub at_ms: f64,
    pub active_calls: usize,
    pub check: GlobalCheck,
}

/// Weighted means of the calls' g values against shared thresholds.
/// Returns `None` for an empty call list.
pub fn check_global(samples: &[(HeuristicSample, f64)], constraints: &Constraints) -> Option<GlobalCheck> {
    let total: f64 = samples.iter().map(|(_, w)| w).sum();
    if samples.is_empty() || total <= 0.0 {
        return None;
    }
    let mean = |f: fn(&HeuristicSample) -> f64| samples.iter().map(|(s, w)| f(s) * w).sum::<f64>() / total;
    let delay_ms = mean(|s| s.delay_ms);
    let loss = mean(|s| s.loss);
    let mos = mean(|s| s.mos);
    let ok = constraints.delay_ok(delay_ms) && constraints.loss_ok(loss) && mos >= constraints.mos_min;
    Some(GlobalCheck {
        ok,
        delay_ms,
        loss,
        mos,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub window_ms: f64,
    /// Relative move of delay or loss counted as drift.
    pub drift_rel: f64,
    pub drift_floor_delay_ms: f64,
    pub drift_floor_loss: f64,
    /// Consecutive drifting windows that open a δ1 state.
    pub drift_windows: u32,
    /// Relative improvement that lets a buffer step be repeated.
    pub repeat_improvement: f64,
    pub learning: bool,
    /// Monitor only when false.
    pub acting: bool,
    pub global_constraints: Constraints,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            window_ms: 5_000.0,
            drift_rel: 0.2,
            drift_floor_delay_ms: 5.0,
            drift_floor_loss: 0.01,
            drift_windows: 2,
            repeat_improvement: 0.1,
            learning: true,
            acting: true,
            global_constraints: Constraints::default(),
        }
    }
}

/// Everything the controller produced during a run.
#[derive(Debug, Clone)]
pub struct ControllerOutput {
    pub states: Vec<CallState>,
    pub transitions: Vec<TransitionRecord>,
    pub episodes: Vec<Episode>,
    pub windows: Vec<WindowRecord>,
    pub global: Vec<GlobalRecord>,
    pub kb: KnowledgeBase,
    pub calls: Vec<CallSpec>,
}

pub struct Controller {
    cfg: ControllerConfig,
    kb: KnowledgeBase,
    calls: Vec<Call>,
    transitions: Vec<TransitionRecord>,
    episodes: Vec<Episode>,
    windows: Vec<WindowRecord>,
    global: Vec<GlobalRecord>,
    next_state_id: u64,
    last_boundary: f64,
}

impl Controller {
    pub fn new(cfg: ControllerConfig, kb: KnowledgeBase, calls: Vec<CallSpec>) -> Result<Self, ControllerError> {
        if !(cfg.window_ms > 0.0) {
            return Err(ControllerError::Config("window_ms must be > 0".into()));
        }
        for c in &calls {
            if !(c.weight > 0.0) {
                return Err(ControllerError::Config(format!("call {} weight must be > 0", c.flow)));
            }
            c.constraints
                .validate()
                .map_err(|e| ControllerError::Config(e.to_string()))?;
        }
        Ok(Self {
            cfg,
            kb,
            calls: calls
                .into_iter()
                .map(|spec| Call {
                    spec,
                    states: Vec::new(),
                    status: CallStatus::Accepted,
                    episode: None,
                    drift: 0,
                    finished: false,
                })
                .collect(),
            transitions: Vec::new(),
            episodes: Vec::new(),
            windows: Vec::new(),
            global: Vec::new(),
            next_state_id: 1,
            last_boundary: 0.0,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn calls(&self) -> &[Call] {
        &self.calls
    }

    pub fn transitions(&self) -> &[TransitionRecord] {
        &self.transitions
    }

    pub fn open_episode(&self, call: usize) -> Option<&Episode> {
        self.calls.get(call).and_then(|c| c.episode.as_ref())
    }

    fn window_s(&self) -> f64 {
        self.cfg.window_ms / 1000.0
    }

    fn new_state(&mut self, call: usize, at_ms: f64, entering: Entering) -> u64 {
        let id = self.next_state_id;
        self.next_state_id += 1;
        let flow = self.calls[call].id();
        let st = CallState::new(id, flow, at_ms, entering, self.window_s());
        self.calls[call].states.push(st);
        id
    }

    /// Closes the current state and opens a successor.
    #[allow(clippy::too_many_arguments)]
    fn transition(
        &mut self,
        call: usize,
        at_ms: f64,
        kind: TransitionKind,
        cause: Cause,
        applied: Option<ActionKind>,
        stopped: Vec<ActionKind>,
        detail: String,
    ) -> u64 {
        let from = {
            let cur = self.calls[call].states.last_mut().expect("call has a state");
            cur.closed_at_ms = Some(at_ms);
            cur.state_id
        };
        let to = self.new_state(call, at_ms, kind.entering());
        log::debug!("call {} state {from} -> {to} via {} ({detail})", self.calls[call].id(), kind.as_str());
        self.transitions.push(TransitionRecord {
            from_state: from,
            to_state: to,
            call_id: self.calls[call].id(),
            kind,
            cause,
            at_ms,
            applied,
            stopped,
            detail,
        });
        self.calls[call].drift = 0;
        to
    }

    /// One control iteration at a window boundary. `world` must already be
    /// advanced to `now_ms`.
    pub fn on_boundary(&mut self, world: &mut SimWorld, now_ms: f64) -> Result<(), ControllerError> {
        let prev = self.last_boundary;
        self.last_boundary = now_ms;
        let changes: Vec<FiredChange> = world
            .fired_changes()
            .iter()
            .filter(|c| c.at_ms >= prev && c.at_ms < now_ms)
            .cloned()
            .collect();

        for i in 0..self.calls.len() {
            let call = &self.calls[i];
            if call.finished {
                continue;
            }
            if call.states.is_empty() {
                if call.spec.start_ms <= now_ms && call.spec.end_ms > now_ms {
                    self.new_state(i, now_ms, Entering::Start);
                }
                continue;
            }
            let sample = world.measure(call.spec.flow)?;
            if now_ms >= call.spec.end_ms {
                if let Some(s) = sample {
                    self.calls[i].states.last_mut().expect("started").absorb(s);
                }
                self.record_window(i, now_ms, sample);
                self.end_call(world, i, now_ms)?;
                continue;
            }
            self.observe(i, sample, &changes, now_ms);
            self.record_window(i, now_ms, sample);
        }

        let active: Vec<usize> = (0..self.calls.len()).filter(|i| self.calls[*i].is_active()).collect();
        let samples: Vec<(HeuristicSample, f64)> = active
            .iter()
            .filter_map(|i| self.calls[*i].g().map(|g| (g, self.calls[*i].spec.weight)))
            .collect();
        if let Some(check) = check_global(&samples, &self.cfg.global_constraints) {
            self.global.push(GlobalRecord {
                at_ms: now_ms,
                active_calls: samples.len(),
                check,
            });
        }
        for &i in &active {
            let call = &mut self.calls[i];
            call.status = match call.g() {
                Some(g) if !call.spec.constraints.satisfied_by(&g) => CallStatus::Degraded,
                _ => CallStatus::Accepted,
            };
        }
        if !self.cfg.acting {
            return Ok(());
        }

        for &i in &active {
            self.settle(i, !changes.is_empty(), now_ms)?;
        }
        let coordinated = if active.len() >= 2 {
            self.coordinate(world, &active, now_ms)?
        } else {
            Vec::new()
        };
        for &i in &active {
            if coordinated.contains(&i) || self.calls[i].status == CallStatus::Accepted {
                continue;
            }
            self.act(world, i, now_ms, false)?;
        }
        Ok(())
    }

    fn record_window(&mut self, i: usize, now_ms: f64, sample: Option<HeuristicSample>) {
        let call = &self.calls[i];
        let cur = call.current().expect("started");
        let g = cur.g_sample();
        self.windows.push(WindowRecord {
            at_ms: now_ms,
            call_id: call.id(),
            sample,
            g,
            state_id: cur.state_id,
            satisfied: g.is_some_and(|g| call.spec.constraints.satisfied_by(&g)),
        });
    }

    /// Absorbs a window sample or opens a δ1 state.
    fn observe(&mut self, i: usize, sample: Option<HeuristicSample>, changes: &[FiredChange], now_ms: f64) {
        let Some(s) = sample else {
            return;
        };
        let cfg = &self.cfg;
        let call = &mut self.calls[i];
        let constraints = call.spec.constraints;
        let cur = call.states.last_mut().expect("started");
        if cur.g.is_empty() {
            cur.absorb(s);
            call.drift = 0;
            return;
        }
        let opening = cur.opening.expect("non-empty state has an opening sample");
        let moved = (s.delay_ms - opening.delay_ms).abs() > cfg.drift_rel * opening.delay_ms.max(cfg.drift_floor_delay_ms)
            || (s.loss - opening.loss).abs() > cfg.drift_rel * opening.loss.max(cfg.drift_floor_loss);
        call.drift = if moved { call.drift + 1 } else { 0 };
        let cat = classify(&s);
        let g_ok = cur.g_sample().is_some_and(|g| constraints.satisfied_by(&g));
        let trigger = if !changes.is_empty() {
            let what: Vec<String> = changes.iter().map(|c| c.change.describe()).collect();
            Some((Cause::NetworkChange, what.join("; ")))
        } else if Some(cat) != cur.category {
            let was = cur.category.map_or("none", |c| c.as_str());
            Some((Cause::HeuristicChange, format!("category {was} -> {}", cat.as_str())))
        } else if call.drift >= cfg.drift_windows {
            Some((
                Cause::HeuristicChange,
                format!("drift to {:.1} ms / {:.2}% loss", s.delay_ms, s.loss * 100.0),
            ))
        } else if g_ok != constraints.satisfied_by(&s) {
            Some((Cause::HeuristicChange, "constraint boundary crossed".to_string()))
        } else {
            None
        };
        match trigger {
            Some((cause, detail)) => {
                self.transition(i, now_ms, TransitionKind::Delta1, cause, None, Vec::new(), detail);
                self.calls[i].states.last_mut().expect("opened").absorb(s);
            }
            None => cur.absorb(s),
        }
    }

    /// Episode bookkeeping before any action: acquire the outcome of the
    /// pending action, close satisfied episodes, open new ones.
    fn settle(&mut self, i: usize, network_changed: bool, now_ms: f64) -> Result<(), ControllerError> {
        let Some(g) = self.calls[i].g() else {
            return Ok(());
        };
        let satisfied = self.calls[i].spec.constraints.satisfied_by(&g);
        if network_changed {
            if let Some(mut ep) = self.calls[i].episode.take() {
                if ep.opened_at_ms < now_ms {
                    ep.pending = None;
                    ep.outcome = EpisodeOutcome::Interrupted;
                    ep.closed_at_ms = Some(now_ms);
                    log::info!("call {}: episode interrupted by network change", self.calls[i].id());
                    self.episodes.push(ep);
                } else {
                    self.calls[i].episode = Some(ep);
                }
            }
        }
        if let Some(ep) = self.calls[i].episode.as_mut() {
            let finished = ep.pending.take();
            if let Some(p) = &finished {
                if self.cfg.learning {
                    self.kb
                        .acquire(p.case, p.action.kind(), HEstimate::new(g.delay_ms, g.loss))?;
                }
                ep.pending = Some(p.clone());
            }
            if satisfied {
                let mut ep = self.calls[i].episode.take().expect("present");
                ep.outcome = EpisodeOutcome::Satisfied;
                ep.closed_at_ms = Some(now_ms);
                if let (true, Some(p)) = (self.cfg.learning, ep.pending.take()) {
                    let steps = self.kb.refine(p.case, p.action.kind())?;
                    ep.refined = steps
                        .iter()
                        .map(|s| match s {
                            RefineStep::Swapped { a, a_current } => format!("swap {a} <-> {a_current}"),
                            RefineStep::Replaced { deleted, a_current } => format!("{a_current} replaces {deleted}"),
                        })
                        .collect();
                }
                log::info!(
                    "call {}: constraints restored after {:.0} s",
                    self.calls[i].id(),
                    (now_ms - ep.opened_at_ms) / 1000.0
                );
                self.episodes.push(ep);
            }
        } else if !satisfied {
            let order_actions: BTreeMap<ScenarioCase, Vec<ActionId>> = ScenarioCase::ALL
                .iter()
                .map(|c| (*c, self.kb.selection_order(*c).into_iter().map(|e| e.action).collect()))
                .collect();
            self.calls[i].episode = Some(Episode {
                call_id: self.calls[i].id(),
                opened_at_ms: now_ms,
                closed_at_ms: None,
                outcome: EpisodeOutcome::Open,
                applied: Vec::new(),
                infeasible: Vec::new(),
                order: order_actions
                    .iter()
                    .map(|(c, v)| (*c, v.iter().map(ActionId::kind).collect()))
                    .collect(),
                ranks: ScenarioCase::ALL
                    .iter()
                    .map(|c| (*c, self.kb.entries(*c).iter().map(|e| e.kind()).collect()))
                    .collect(),
                exhausted: false,
                coordinated: false,
                refined: Vec::new(),
                order_actions,
                tried: Vec::new(),
                pending: None,
            });
        }
        Ok(())
    }

    /// Picks and applies the next action of a degraded call's episode.
    /// Returns the applied action, if any.
    fn act(
        &mut self,
        world: &mut SimWorld,
        i: usize,
        now_ms: f64,
        coordinated: bool,
    ) -> Result<Option<(ActionKind, String)>, ControllerError> {
        let Some(g) = self.calls[i].g() else {
            return Ok(None);
        };
        let constraints = self.calls[i].spec.constraints;
        if constraints.satisfied_by(&g) {
            return Ok(None);
        }
        let Some(mut ep) = self.calls[i].episode.take() else {
            return Ok(None);
        };
        let flow = self.calls[i].id();
        let picked = pick_and_apply(&self.cfg, &self.kb, world, flow, &mut ep, g, &constraints, now_ms, coordinated);
        self.calls[i].episode = Some(ep);
        let picked = picked?;
        if let (Some((kind, detail)), false) = (&picked, coordinated) {
            self.transition(
                i,
                now_ms,
                TransitionKind::Delta2,
                Cause::Action,
                Some(*kind),
                Vec::new(),
                detail.clone(),
            );
        }
        Ok(picked)
    }

    /// Multi-call step: stop the actions of accepted calls and redirect
    /// effort to degraded ones. Returns the calls that got a δ3 state.
    fn coordinate(
        &mut self,
        world: &mut SimWorld,
        active: &[usize],
        now_ms: f64,
    ) -> Result<Vec<usize>, ControllerError> {
        let needs = active.iter().any(|&i| {
            self.calls[i].status == CallStatus::Degraded
                && self.calls[i].episode.as_ref().is_some_and(|e| !e.coordinated)
        });
        if !needs {
            return Ok(Vec::new());
        }
        let mut affected = Vec::new();
        for &i in active {
            if self.calls[i].status != CallStatus::Accepted {
                continue;
            }
            let flow = self.calls[i].id();
            let mut stopped = Vec::new();
            let mut details = Vec::new();
            for kind in actions::active_actions(world, flow)? {
                let effect = actions::stop_action(world, flow, kind)?;
                if effect.changed {
                    stopped.push(kind);
                    details.push(format!("stop {kind}: {}", effect.detail));
                }
            }
            if !stopped.is_empty() {
                log::info!("call {flow}: accepted, {}", details.join("; "));
                self.transition(
                    i,
                    now_ms,
                    TransitionKind::Delta3,
                    Cause::Coordination,
                    None,
                    stopped,
                    details.join("; "),
                );
                affected.push(i);
            }
        }
        for &i in active {
            if self.calls[i].status != CallStatus::Degraded {
                continue;
            }
            if let Some((kind, detail)) = self.act(world, i, now_ms, true)? {
                self.transition(
                    i,
                    now_ms,
                    TransitionKind::Delta3,
                    Cause::Coordination,
                    Some(kind),
                    Vec::new(),
                    detail,
                );
                affected.push(i);
            }
        }
        Ok(affected)
    }

    fn end_call(&mut self, world: &mut SimWorld, i: usize, now_ms: f64) -> Result<(), ControllerError> {
        let flow = self.calls[i].id();
        let mut stopped = Vec::new();
        for kind in actions::active_actions(world, flow)? {
            if actions::stop_action(world, flow, kind)?.changed {
                stopped.push(kind);
            }
        }
        let last = self.calls[i].current().and_then(|s| s.sample);
        self.transition(
            i,
            now_ms,
            TransitionKind::Goal,
            Cause::CallEnd,
            None,
            stopped,
            "call terminated".to_string(),
        );
        let goal = self.calls[i].states.last_mut().expect("goal");
        if let Some(s) = last {
            goal.absorb(s);
        }
        goal.closed_at_ms = Some(now_ms);
        if let Some(mut ep) = self.calls[i].episode.take() {
            ep.pending = None;
            ep.outcome = EpisodeOutcome::CallEnded;
            ep.closed_at_ms = Some(now_ms);
            self.episodes.push(ep);
        }
        self.calls[i].finished = true;
        Ok(())
    }

    /// Terminates every call still running at the end of the run.
    pub fn finish(mut self, world: &mut SimWorld, now_ms: f64) -> Result<ControllerOutput, ControllerError> {
        for i in 0..self.calls.len() {
            if self.calls[i].is_active() {
                self.end_call(world, i, now_ms)?;
            }
        }
        let mut states: Vec<CallState> = self.calls.iter().flat_map(|c| c.states.iter().cloned()).collect();
        states.sort_by_key(|s| s.state_id);
        let mut episodes = self.episodes;
        episodes.sort_by(|a, b| a.opened_at_ms.total_cmp(&b.opened_at_ms).then(a.call_id.cmp(&b.call_id)));
        Ok(ControllerOutput {
            states,
            transitions: self.transitions,
            episodes,
            windows: self.windows,
            global: self.global,
            kb: self.kb,
            calls: self.calls.into_iter().map(|c| c.spec).collect(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn pick_and_apply(
    cfg: &ControllerConfig,
    kb: &KnowledgeBase,
    world: &mut SimWorld,
    flow: FlowId,
    ep: &mut Episode,
    g: HeuristicSample,
    constraints: &Constraints,
    now_ms: f64,
    coordinated: bool,
) -> Result<Option<(ActionKind, String)>, ControllerError> {
    let case = detect_case(g.delay_ms, g.loss, constraints);
    let last = ep.pending.take();

    let mut repeat = None;
    if let Some(p) = &last {
        let improved = |before: f64, after: f64| before - after > cfg.repeat_improvement * before;
        let buffer = world.effective_queue_config().capacity_pkts;
        match p.action {
            ActionId::DecreaseBuffer { .. }
                if p.case == case
                    && improved(p.before.delay_ms, g.delay_ms)
                    && constraints.loss_ok(g.loss)
                    && buffer > MIN_BUFFER_PKTS =>
            {
                repeat = Some(p.action.clone())
            }
            ActionId::IncreaseBuffer { .. }
                if p.case == case
                    && improved(p.before.loss, g.loss)
                    && constraints.delay_ok(g.delay_ms)
                    && buffer < MAX_BUFFER_PKTS =>
            {
                repeat = Some(p.action.clone())
            }
            _ => {}
        }
    }

    let mut candidates: Vec<ActionId> = Vec::new();
    if let Some(a) = repeat.clone() {
        candidates.push(a);
    }
    for a in ep.order_actions.get(&case).into_iter().flatten() {
        let k = a.kind();
        if ep.tried.contains(&k) || ep.tried.iter().any(|t| kb.conflicts(*t, k)) {
            continue;
        }
        if actions::is_active(world, flow, k)? {
            continue;
        }
        candidates.push(a.clone());
    }

    if coordinated {
        ep.coordinated = true;
    }
    for action in candidates {
        let kind = action.kind();
        let is_repeat = repeat.as_ref() == Some(&action);
        if !ep.tried.contains(&kind) {
            ep.tried.push(kind);
        }
        match actions::apply_action(world, flow, &action) {
            Ok(effect) => {
                ep.applied.push(AppliedAction {
                    kind,
                    case,
                    at_ms: now_ms,
                    coordinated,
                    repeat: is_repeat,
                });
                ep.pending = Some(Pending {
                    action: action.clone(),
                    case,
                    before: g,
                });
                log::info!("call {flow}: {case} -> {action} ({})", effect.detail);
                return Ok(Some((kind, format!("{case}: {action}; {}", effect.detail))));
            }
            Err(ActionError::Infeasible { action, reason }) => {
                log::info!("call {flow}: {action} infeasible: {reason}");
                ep.infeasible.push(kind);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if !ep.exhausted {
        ep.exhausted = true;
        log::warn!("call {flow}: no untried action left for {case}; monitoring");
    }
    Ok(None)
}
