//! Scenario loading, run orchestration and artifact files.

mod calibrate;
mod output;
pub mod presets;
mod run;
mod scenario;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerError;
use crate::knowledge::KnowledgeError;
use crate::netsim::NetsimError;

pub use calibrate::{calibrate, calibration_scenario, CalibrationRow, CALIBRATION_SEED};
pub use output::{
    read_csv, read_outputs, summarize, write_outputs, CallSummary, EpisodeRow, EpisodeSummary, GlobalRow, GlobalSummary,
    MeansSummary, OutputFiles, OutputTables, StateRow, Summary, SummaryMeta, TraceRow, TransitionRow, WindowRow,
};
pub use presets::{preset, PRESET_NAMES};
pub use run::{run, RunArtifacts, RunOptions};
pub use scenario::{CallConfig, Profile, Scenario, TimelineEvent, SCENARIO_VERSION};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("unknown scenario {0:?} (neither a preset nor a readable file)")]
    UnknownScenario(String),
    #[error(transparent)]
    Network(#[from] NetsimError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Regenerate the knowledge base estimates.
    Calibrate,
    /// Closed-loop control.
    Control,
    /// Monitoring only, no actions.
    Baseline,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Calibrate => "calibrate",
            Mode::Control => "control",
            Mode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "calibrate" => Ok(Mode::Calibrate),
            "control" => Ok(Mode::Control),
            "baseline" => Ok(Mode::Baseline),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

/// Resolves a preset name or a scenario file path.
pub fn load_scenario(name_or_path: &str) -> Result<Scenario, HarnessError> {
    if let Some(s) = preset(name_or_path) {
        return Ok(s);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return Scenario::load(path);
    }
    Err(HarnessError::UnknownScenario(name_or_path.to_string()))
}
