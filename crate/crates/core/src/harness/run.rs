use super::calibrate::{calibrate, CalibrationRow};
use super::output::{
    summarize, EpisodeRow, GlobalRow, StateRow, Summary, SummaryMeta, TraceRow, TransitionRow, WindowRow,
};
use super::{HarnessError, Mode, Scenario};
use crate::actions::apply_action;
use crate::controller::{validate_run, CallSpec, Controller, ControllerConfig, ControllerOutput, ValidationError};
use crate::knowledge::{default_knowledge, KnowledgeBase};
use crate::netsim::{FlowCounters, FlowId, SimWorld};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub mode: Mode,
    /// Overrides the scenario's learning flag.
    pub learning: Option<bool>,
    /// Starting knowledge base; the bundled one when `None`.
    pub kb: Option<KnowledgeBase>,
}

impl RunOptions {
    pub fn new(seed: u64, mode: Mode) -> Self {
        Self {
            seed,
            mode,
            learning: None,
            kb: None,
        }
    }
}

/// Everything a run produced, in the shape of the output files.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub scenario: Scenario,
    pub seed: u64,
    pub mode: Mode,
    pub learning: bool,
    pub trace: Vec<TraceRow>,
    pub states: Vec<StateRow>,
    pub transitions: Vec<TransitionRow>,
    pub windows: Vec<WindowRow>,
    pub global: Vec<GlobalRow>,
    pub episodes: Vec<EpisodeRow>,
    pub calibration: Vec<CalibrationRow>,
    pub kb: KnowledgeBase,
    pub summary: Summary,
    pub counters: Vec<FlowCounters>,
    /// In-memory controller record (absent for calibration).
    pub controller: Option<ControllerOutput>,
}

impl RunArtifacts {
    /// Runs the state-machine validator over the controller record.
    pub fn validate(&self) -> Result<(), ValidationError> {
        match &self.controller {
            Some(out) => validate_run(out),
            None => Ok(()),
        }
    }
}

fn meta(scenario: &Scenario, opts: &RunOptions, learning: bool) -> SummaryMeta {
    SummaryMeta {
        scenario: scenario.name.clone(),
        seed: opts.seed,
        mode: opts.mode,
        learning,
        duration_s: scenario.duration_s,
        calls: scenario.calls.len(),
        constraints: scenario.constraints(),
    }
}

pub fn run(scenario: &Scenario, opts: RunOptions) -> Result<RunArtifacts, HarnessError> {
    scenario.validate()?;
    let learning = opts.learning.unwrap_or(scenario.learning);
    if opts.mode == Mode::Calibrate {
        let (kb, calibration) = calibrate(opts.seed)?;
        let summary = summarize(&meta(scenario, &opts, learning), &[], &[], &[], &[], &[]);
        return Ok(RunArtifacts {
            scenario: scenario.clone(),
            seed: opts.seed,
            mode: opts.mode,
            learning,
            trace: Vec::new(),
            states: Vec::new(),
            transitions: Vec::new(),
            windows: Vec::new(),
            global: Vec::new(),
            episodes: Vec::new(),
            calibration,
            kb,
            summary,
            counters: Vec::new(),
            controller: None,
        });
    }

    let mut world = SimWorld::new(scenario.world_config(true), opts.seed)?;
    for (i, call) in scenario.calls.iter().enumerate() {
        for a in &call.initial_actions {
            apply_action(&mut world, FlowId(i as u32), a).map_err(crate::controller::ControllerError::from)?;
        }
    }
    let window_ms = scenario.window_s * 1000.0;
    let cfg = ControllerConfig {
        window_ms,
        learning,
        acting: opts.mode == Mode::Control,
        global_constraints: scenario.constraints(),
        ..ControllerConfig::default()
    };
    let specs = scenario
        .calls
        .iter()
        .enumerate()
        .map(|(i, c)| CallSpec {
            flow: FlowId(i as u32),
            constraints: scenario.constraints(),
            weight: c.weight(),
            start_ms: c.start_s * 1000.0,
            end_ms: scenario.call_end_s(c) * 1000.0,
        })
        .collect();
    let kb = opts.kb.clone().unwrap_or_else(default_knowledge);
    let mut ctl = Controller::new(cfg, kb, specs)?;

    let end_ms = scenario.duration_s * 1000.0;
    let steps = (end_ms / window_ms).round() as u64;
    ctl.on_boundary(&mut world, 0.0)?;
    for k in 1..=steps {
        let t = k as f64 * window_ms;
        world.advance(t);
        ctl.on_boundary(&mut world, t)?;
    }
    let out = ctl.finish(&mut world, end_ms)?;

    let trace: Vec<TraceRow> = world.trace().iter().map(TraceRow::from).collect();
    let states: Vec<StateRow> = out.states.iter().map(StateRow::from).collect();
    let transitions: Vec<TransitionRow> = out.transitions.iter().map(TransitionRow::from).collect();
    let windows: Vec<WindowRow> = out.windows.iter().map(WindowRow::from).collect();
    let global: Vec<GlobalRow> = out.global.iter().map(GlobalRow::from).collect();
    let episodes: Vec<EpisodeRow> = out.episodes.iter().map(EpisodeRow::from).collect();
    let summary = summarize(
        &meta(scenario, &opts, learning),
        &trace,
        &windows,
        &global,
        &episodes,
        &transitions,
    );
    let counters = (0..scenario.calls.len())
        .map(|i| world.counters(FlowId(i as u32)))
        .collect::<Result<_, _>>()?;
    Ok(RunArtifacts {
        scenario: scenario.clone(),
        seed: opts.seed,
        mode: opts.mode,
        learning,
        trace,
        states,
        transitions,
        windows,
        global,
        episodes,
        calibration: Vec::new(),
        kb: out.kb.clone(),
        summary,
        counters,
        controller: Some(out),
    })
}
