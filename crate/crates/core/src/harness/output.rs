use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::calibrate::CalibrationRow;
use super::run::RunArtifacts;
use super::{HarnessError, Mode, Scenario};
use crate::controller::{
    CallState, Entering, Episode, EpisodeOutcome, GlobalRecord, TransitionRecord, WindowRecord,
};
use crate::knowledge::KnowledgeBase;
use crate::metrics::{estimate_mos, Constraints, HeuristicSample};
use crate::netsim::{TraceEvent, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time_ms: f64,
    pub flow_id: u32,
    pub event: TraceEvent,
    pub delay_ms: Option<f64>,
}

impl TraceRow {
    pub const HEADER: &'static [&'static str] = &["time_ms", "flow_id", "event", "delay_ms"];
}

impl From<&TraceRecord> for TraceRow {
    fn from(r: &TraceRecord) -> Self {
        Self {
            time_ms: r.time_ms,
            flow_id: r.flow.0,
            event: r.event,
            delay_ms: r.delay_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRow {
    pub state_id: u64,
    pub call_id: u32,
    pub entering: Entering,
    pub opened_ms: f64,
    pub closed_ms: Option<f64>,
    pub avg_delay: Option<f64>,
    pub avg_loss: Option<f64>,
    pub mos: Option<f64>,
    pub category: Option<String>,
    pub windows: u64,
}

impl StateRow {
    pub const HEADER: &'static [&'static str] = &[
        "state_id",
        "call_id",
        "entering",
        "opened_ms",
        "closed_ms",
        "avg_delay",
        "avg_loss",
        "mos",
        "category",
        "windows",
    ];
}

impl From<&CallState> for StateRow {
    fn from(s: &CallState) -> Self {
        let g = s.g_sample();
        Self {
            state_id: s.state_id,
            call_id: s.call_id.0,
            entering: s.entering,
            opened_ms: s.opened_at_ms,
            closed_ms: s.closed_at_ms,
            avg_delay: g.map(|g| g.delay_ms),
            avg_loss: g.map(|g| g.loss),
            mos: g.map(|g| g.mos),
            category: s.category.map(|c| c.as_str().to_string()),
            windows: s.g.samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub from_state: u64,
    pub to_state: u64,
    pub call_id: u32,
    pub kind: String,
    pub at_ms: f64,
    pub cause: String,
    pub action: Option<String>,
    pub stopped: String,
    pub detail: String,
}

impl TransitionRow {
    pub const HEADER: &'static [&'static str] = &[
        "from_state",
        "to_state",
        "call_id",
        "kind",
        "at_ms",
        "cause",
        "action",
        "stopped",
        "detail",
    ];
}

impl From<&TransitionRecord> for TransitionRow {
    fn from(t: &TransitionRecord) -> Self {
        Self {
            from_state: t.from_state,
            to_state: t.to_state,
            call_id: t.call_id.0,
            kind: t.kind.as_str().to_string(),
            at_ms: t.at_ms,
            cause: t.cause.as_str().to_string(),
            action: t.applied.map(|k| k.as_str().to_string()),
            stopped: t.stopped.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(";"),
            detail: t.detail.clone(),
        }
    }
}

/// One call's measurement window (plot data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub time_ms: f64,
    pub call_id: u32,
    pub state_id: u64,
    pub delay_ms: Option<f64>,
    pub loss: Option<f64>,
    pub mos: Option<f64>,
    pub g_delay_ms: Option<f64>,
    pub g_loss: Option<f64>,
    pub g_mos: Option<f64>,
    pub g_satisfied: bool,
}

impl WindowRow {
    pub const HEADER: &'static [&'static str] = &[
        "time_ms",
        "call_id",
        "state_id",
        "delay_ms",
        "loss",
        "mos",
        "g_delay_ms",
        "g_loss",
        "g_mos",
        "g_satisfied",
    ];

    pub fn sample(&self) -> Option<HeuristicSample> {
        match (self.delay_ms, self.loss, self.mos) {
            (Some(d), Some(l), Some(m)) => HeuristicSample::with_mos(d, l, m).ok(),
            _ => None,
        }
    }
}

impl From<&WindowRecord> for WindowRow {
    fn from(w: &WindowRecord) -> Self {
        Self {
            time_ms: w.at_ms,
            call_id: w.call_id.0,
            state_id: w.state_id,
            delay_ms: w.sample.map(|s| s.delay_ms),
            loss: w.sample.map(|s| s.loss),
            mos: w.sample.map(|s| s.mos),
            g_delay_ms: w.g.map(|s| s.delay_ms),
            g_loss: w.g.map(|s| s.loss),
            g_mos: w.g.map(|s| s.mos),
            g_satisfied: w.satisfied,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRow {
    pub time_ms: f64,
    pub active_calls: usize,
    pub delay_ms: f64,
    pub loss: f64,
    pub mos: f64,
    pub ok: bool,
}

impl GlobalRow {
    pub const HEADER: &'static [&'static str] = &["time_ms", "active_calls", "delay_ms", "loss", "mos", "ok"];
}

impl From<&GlobalRecord> for GlobalRow {
    fn from(g: &GlobalRecord) -> Self {
        Self {
            time_ms: g.at_ms,
            active_calls: g.active_calls,
            delay_ms: g.check.delay_ms,
            loss: g.check.loss,
            mos: g.check.mos,
            ok: g.check.ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub call_id: u32,
    pub opened_ms: f64,
    pub closed_ms: Option<f64>,
    pub outcome: EpisodeOutcome,
    pub time_to_satisfaction_ms: Option<f64>,
    /// Applied actions in order; repeated buffer steps carry a `+`.
    pub actions: String,
    pub final_action: Option<String>,
    pub infeasible: String,
    pub exhausted: bool,
    pub coordinated: bool,
    pub refined: String,
}

impl EpisodeRow {
    pub const HEADER: &'static [&'static str] = &[
        "call_id",
        "opened_ms",
        "closed_ms",
        "outcome",
        "time_to_satisfaction_ms",
        "actions",
        "final_action",
        "infeasible",
        "exhausted",
        "coordinated",
        "refined",
    ];

    pub fn action_list(&self) -> Vec<String> {
        if self.actions.is_empty() {
            return Vec::new();
        }
        self.actions.split(';').map(str::to_string).collect()
    }
}

impl From<&Episode> for EpisodeRow {
    fn from(e: &Episode) -> Self {
        Self {
            call_id: e.call_id.0,
            opened_ms: e.opened_at_ms,
            closed_ms: e.closed_at_ms,
            outcome: e.outcome,
            time_to_satisfaction_ms: e.time_to_satisfaction_ms(),
            actions: e
                .applied
                .iter()
                .map(|a| format!("{}{}", a.kind, if a.repeat { "+" } else { "" }))
                .collect::<Vec<_>>()
                .join(";"),
            final_action: e.final_action().map(|k| k.as_str().to_string()),
            infeasible: e.infeasible.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(";"),
            exhausted: e.exhausted,
            coordinated: e.coordinated,
            refined: e.refined.join(";"),
        }
    }
}

/// Run identity carried into the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMeta {
    pub scenario: String,
    pub seed: u64,
    pub mode: Mode,
    pub learning: bool,
    pub duration_s: f64,
    pub calls: usize,
    pub constraints: Constraints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub opened_ms: f64,
    pub closed_ms: Option<f64>,
    pub outcome: EpisodeOutcome,
    pub time_to_satisfaction_ms: Option<f64>,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSummary {
    pub call_id: u32,
    pub delivered: u64,
    pub recovered: u64,
    pub lost: u64,
    pub avg_delay_ms: Option<f64>,
    pub avg_loss: Option<f64>,
    pub mos: Option<f64>,
    pub constraints_met: bool,
    pub windows: usize,
    pub satisfied_windows: usize,
    pub satisfaction_fraction: Option<f64>,
    /// End of the first successful episode (0 when the call never needed one).
    pub converged_at_ms: Option<f64>,
    pub post_convergence_windows: usize,
    pub post_convergence_satisfied: usize,
    pub post_convergence_fraction: Option<f64>,
    pub episodes: Vec<EpisodeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeansSummary {
    pub windows: usize,
    pub delay_ms: f64,
    pub loss: f64,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSummary {
    pub windows: usize,
    pub means: MeansSummary,
    pub ok_fraction: f64,
    pub first_delta3_ms: Option<f64>,
    /// Weighted means over the windows after the first δ3 transition.
    pub post_coordination: Option<MeansSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub meta: SummaryMeta,
    pub calls: Vec<CallSummary>,
    pub global: Option<GlobalSummary>,
    pub transitions: BTreeMap<String, usize>,
    /// Every call's run averages satisfy the constraints.
    pub constraints_met: bool,
}

fn means(rows: &[&GlobalRow]) -> Option<MeansSummary> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(MeansSummary {
        windows: rows.len(),
        delay_ms: rows.iter().map(|r| r.delay_ms).sum::<f64>() / n,
        loss: rows.iter().map(|r| r.loss).sum::<f64>() / n,
        mos: rows.iter().map(|r| r.mos).sum::<f64>() / n,
    })
}

/// Builds the run summary from the output tables alone.
pub fn summarize(
    meta: &SummaryMeta,
    trace: &[TraceRow],
    windows: &[WindowRow],
    global: &[GlobalRow],
    episodes: &[EpisodeRow],
    transitions: &[TransitionRow],
) -> Summary {
    let c = meta.constraints;
    let mut calls = Vec::new();
    for call in 0..meta.calls as u32 {
        let (mut delivered, mut recovered, mut drops, mut delay_sum) = (0u64, 0u64, 0u64, 0.0);
        for r in trace.iter().filter(|r| r.flow_id == call) {
            match r.event {
                TraceEvent::Delivered => {
                    delivered += 1;
                    delay_sum += r.delay_ms.unwrap_or(0.0);
                }
                TraceEvent::Recovered => {
                    recovered += 1;
                    delay_sum += r.delay_ms.unwrap_or(0.0);
                }
                e if e.is_drop() => drops += 1,
                _ => {}
            }
        }
        let lost = drops.saturating_sub(recovered);
        let received = delivered + recovered;
        let avg_delay_ms = (received > 0).then(|| delay_sum / received as f64);
        let avg_loss = (delivered + drops > 0).then(|| lost as f64 / (delivered + drops) as f64);
        let mos = match (avg_delay_ms, avg_loss) {
            (Some(d), Some(l)) => estimate_mos(d, l).ok(),
            _ => None,
        };
        let constraints_met = match (avg_delay_ms, avg_loss, mos) {
            (Some(d), Some(l), Some(m)) => c.delay_ok(d) && c.loss_ok(l) && m >= c.mos_min,
            _ => true,
        };

        let call_windows: Vec<(f64, bool)> = windows
            .iter()
            .filter(|w| w.call_id == call)
            .filter_map(|w| w.sample().map(|s| (w.time_ms, c.satisfied_by(&s))))
            .collect();
        let satisfied_windows = call_windows.iter().filter(|w| w.1).count();
        let call_eps: Vec<&EpisodeRow> = episodes.iter().filter(|e| e.call_id == call).collect();
        let converged_at_ms = if call_eps.is_empty() {
            Some(0.0)
        } else {
            call_eps
                .iter()
                .filter(|e| e.outcome == EpisodeOutcome::Satisfied)
                .filter_map(|e| e.closed_ms)
                .reduce(f64::min)
        };
        let post: Vec<&(f64, bool)> = match converged_at_ms {
            Some(t) => call_windows.iter().filter(|w| w.0 > t).collect(),
            None => Vec::new(),
        };
        let post_ok = post.iter().filter(|w| w.1).count();
        let frac = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        calls.push(CallSummary {
            call_id: call,
            delivered,
            recovered,
            lost,
            avg_delay_ms,
            avg_loss,
            mos,
            constraints_met,
            windows: call_windows.len(),
            satisfied_windows,
            satisfaction_fraction: frac(satisfied_windows, call_windows.len()),
            converged_at_ms,
            post_convergence_windows: post.len(),
            post_convergence_satisfied: post_ok,
            post_convergence_fraction: frac(post_ok, post.len()),
            episodes: call_eps
                .iter()
                .map(|e| EpisodeSummary {
                    opened_ms: e.opened_ms,
                    closed_ms: e.closed_ms,
                    outcome: e.outcome,
                    time_to_satisfaction_ms: e.time_to_satisfaction_ms,
                    actions: e.action_list(),
                })
                .collect(),
        });
    }

    let first_delta3_ms = transitions
        .iter()
        .filter(|t| t.kind == "delta3")
        .map(|t| t.at_ms)
        .reduce(f64::min);
    let all: Vec<&GlobalRow> = global.iter().collect();
    let global_summary = means(&all).map(|m| GlobalSummary {
        windows: all.len(),
        ok_fraction: all.iter().filter(|r| r.ok).count() as f64 / all.len() as f64,
        means: m,
        first_delta3_ms,
        post_coordination: first_delta3_ms.and_then(|t| {
            let after: Vec<&GlobalRow> = global.iter().filter(|r| r.time_ms > t).collect();
            means(&after)
        }),
    });
    let mut counts = BTreeMap::new();
    for t in transitions {
        *counts.entry(t.kind.clone()).or_insert(0) += 1;
    }
    Summary {
        meta: meta.clone(),
        constraints_met: calls.iter().all(|c| c.constraints_met),
        calls,
        global: global_summary,
        transitions: counts,
    }
}

/// Paths of the files written for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFiles {
    pub dir: PathBuf,
    pub trace: PathBuf,
    pub states: PathBuf,
    pub transitions: PathBuf,
    pub timeseries: PathBuf,
    pub global: PathBuf,
    pub episodes: PathBuf,
    pub calibration: PathBuf,
    pub kb: PathBuf,
    pub summary: PathBuf,
    pub scenario: PathBuf,
}

impl OutputFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            trace: dir.join("trace.csv"),
            states: dir.join("states.csv"),
            transitions: dir.join("transitions.csv"),
            timeseries: dir.join("timeseries.csv"),
            global: dir.join("global.csv"),
            episodes: dir.join("episodes.csv"),
            calibration: dir.join("calibration.csv"),
            kb: dir.join("kb.json"),
            summary: dir.join("summary.json"),
            scenario: dir.join("scenario.json"),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_outputs(art: &RunArtifacts, dir: &Path) -> Result<OutputFiles, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let f = OutputFiles::in_dir(dir);
    write_csv(&f.trace, TraceRow::HEADER, &art.trace)?;
    write_csv(&f.states, StateRow::HEADER, &art.states)?;
    write_csv(&f.transitions, TransitionRow::HEADER, &art.transitions)?;
    write_csv(&f.timeseries, WindowRow::HEADER, &art.windows)?;
    write_csv(&f.global, GlobalRow::HEADER, &art.global)?;
    write_csv(&f.episodes, EpisodeRow::HEADER, &art.episodes)?;
    write_csv(&f.calibration, CalibrationRow::HEADER, &art.calibration)?;
    write_text(&f.kb, &(art.kb.to_json() + "\n"))?;
    let summary = serde_json::to_string_pretty(&art.summary).expect("summary serializes");
    write_text(&f.summary, &(summary + "\n"))?;
    write_text(&f.scenario, &(art.scenario.to_json() + "\n"))?;
    Ok(f)
}

/// Tables read back from an output directory.
#[derive(Debug, Clone)]
pub struct OutputTables {
    pub trace: Vec<TraceRow>,
    pub states: Vec<StateRow>,
    pub transitions: Vec<TransitionRow>,
    pub windows: Vec<WindowRow>,
    pub global: Vec<GlobalRow>,
    pub episodes: Vec<EpisodeRow>,
    pub kb: KnowledgeBase,
    pub summary: Summary,
    pub scenario: Scenario,
}

impl OutputTables {
    /// The summary recomputed from the tables (identity fields come from
    /// the stored summary).
    pub fn recompute_summary(&self) -> Summary {
        summarize(
            &self.summary.meta,
            &self.trace,
            &self.windows,
            &self.global,
            &self.episodes,
            &self.transitions,
        )
    }
}

pub fn read_outputs(dir: &Path) -> Result<OutputTables, HarnessError> {
    let f = OutputFiles::in_dir(dir);
    let read = |p: &Path| fs::read_to_string(p).map_err(io_err(p));
    let summary: Summary =
        serde_json::from_str(&read(&f.summary)?).map_err(|e| HarnessError::Parse(e.to_string()))?;
    Ok(OutputTables {
        trace: read_csv(&f.trace)?,
        states: read_csv(&f.states)?,
        transitions: read_csv(&f.transitions)?,
        windows: read_csv(&f.timeseries)?,
        global: read_csv(&f.global)?,
        episodes: read_csv(&f.episodes)?,
        kb: KnowledgeBase::from_json(&read(&f.kb)?)?,
        summary,
        scenario: Scenario::from_json(&read(&f.scenario)?)?,
    })
}
