use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::actions::ActionId;
use crate::metrics::Constraints;
use crate::netsim::{
    BackgroundFlowConfig, ChangeKind, LinkConfig, MediaFlowConfig, NetworkChange, QueueConfig, WorldConfig,
};

pub const SCENARIO_VERSION: u32 = 1;

fn version() -> u32 {
    SCENARIO_VERSION
}
fn yes() -> bool {
    true
}
fn window() -> f64 {
    5.0
}

/// Media profile of a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 26 kbps, one packet every 20 ms.
    #[default]
    Voice,
    /// 512 kbps, one packet every 20 ms.
    Video,
}

impl Profile {
    pub fn rate_kbps(self) -> f64 {
        match self {
            Profile::Voice => 26.0,
            Profile::Video => 512.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallConfig {
    #[serde(default)]
    pub profile: Profile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    #[serde(default)]
    pub emergency: bool,
    #[serde(default)]
    pub start_s: f64,
    /// Defaults to the end of the scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_s: Option<f64>,
    #[serde(default)]
    pub access_latency_ms: f64,
    #[serde(default)]
    pub access_loss: f64,
    /// Mechanisms in force from the start of the call.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub initial_actions: Vec<ActionId>,
}

impl Default for CallConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Voice,
            weight: None,
            emergency: false,
            start_s: 0.0,
            end_s: None,
            access_latency_ms: 0.0,
            access_loss: 0.0,
            initial_actions: Vec::new(),
        }
    }
}

impl CallConfig {
    pub fn weight(&self) -> f64 {
        match (self.weight, self.emergency) {
            (Some(w), _) => w,
            (None, true) => crate::controller::EMERGENCY_WEIGHT,
            (None, false) => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub at_s: f64,
    pub change: ChangeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "version")]
    pub version: u32,
    pub name: String,
    pub duration_s: f64,
    #[serde(default = "window")]
    pub window_s: f64,
    pub link: LinkConfig,
    pub queue: QueueConfig,
    #[serde(default)]
    pub background: Vec<BackgroundFlowConfig>,
    #[serde(default)]
    pub calls: Vec<CallConfig>,
    #[serde(default)]
    pub timeline: Vec<TimelineEvent>,
    #[serde(default = "yes")]
    pub learning: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<Constraints>,
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> HarnessError {
    HarnessError::Invalid {
        field: field.into(),
        msg: msg.into(),
    }
}

fn on_grid(t: f64, window_s: f64) -> bool {
    let k = (t / window_s).round();
    (k * window_s - t).abs() < 1e-9
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| HarnessError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn constraints(&self) -> Constraints {
        self.constraints.unwrap_or_default()
    }

    pub fn call_end_s(&self, call: &CallConfig) -> f64 {
        call.end_s.unwrap_or(self.duration_s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.version != SCENARIO_VERSION {
            return Err(invalid("version", format!("unsupported version {}", self.version)));
        }
        if !(self.duration_s > 0.0) {
            return Err(invalid("duration_s", "must be > 0"));
        }
        if !(self.window_s > 0.0) {
            return Err(invalid("window_s", "must be > 0"));
        }
        if !on_grid(self.duration_s, self.window_s) {
            return Err(invalid("duration_s", "must be a multiple of window_s"));
        }
        self.link.validate().map_err(|e| invalid("link", e.to_string()))?;
        self.queue.validate().map_err(|e| invalid("queue", e.to_string()))?;
        for (i, b) in self.background.iter().enumerate() {
            b.validate().map_err(|e| invalid(format!("background[{i}]"), e.to_string()))?;
        }
        if let Some(c) = &self.constraints {
            c.validate().map_err(|e| invalid("constraints", e.to_string()))?;
        }
        for (i, c) in self.calls.iter().enumerate() {
            let f = |name: &str| format!("calls[{i}].{name}");
            let end = self.call_end_s(c);
            if !(c.start_s >= 0.0) || !on_grid(c.start_s, self.window_s) {
                return Err(invalid(f("start_s"), "must be >= 0 and a multiple of window_s"));
            }
            if !(end > c.start_s) || end > self.duration_s || !on_grid(end, self.window_s) {
                return Err(invalid(
                    f("end_s"),
                    "must lie after start_s, within duration_s, on the window grid",
                ));
            }
            if !(c.weight() > 0.0) {
                return Err(invalid(f("weight"), "must be > 0"));
            }
            for (j, a) in c.initial_actions.iter().enumerate() {
                a.validate()
                    .map_err(|e| invalid(f(&format!("initial_actions[{j}]")), e.to_string()))?;
            }
        }
        for (i, t) in self.timeline.iter().enumerate() {
            if !(t.at_s >= 0.0 && t.at_s <= self.duration_s) {
                return Err(invalid(format!("timeline[{i}].at_s"), "outside the scenario"));
            }
            if i > 0 && self.timeline[i - 1].at_s > t.at_s {
                return Err(invalid(format!("timeline[{i}].at_s"), "timeline is not sorted"));
            }
            t.change
                .validate()
                .map_err(|e| invalid(format!("timeline[{i}].change"), e.to_string()))?;
        }
        self.world_config(false)
            .validate()
            .map_err(|e| invalid("scenario", e.to_string()))?;
        Ok(())
    }

    pub fn media_config(&self, call: &CallConfig) -> MediaFlowConfig {
        MediaFlowConfig {
            rate_kbps: call.profile.rate_kbps(),
            start_ms: call.start_s * 1000.0,
            end_ms: self.call_end_s(call) * 1000.0,
            access_latency_ms: call.access_latency_ms,
            access_loss: call.access_loss,
            ..MediaFlowConfig::default()
        }
    }

    pub fn world_config(&self, record_trace: bool) -> WorldConfig {
        WorldConfig {
            link: self.link,
            queue: self.queue.clone(),
            media: self.calls.iter().map(|c| self.media_config(c)).collect(),
            background: self.background.clone(),
            timeline: self
                .timeline
                .iter()
                .map(|t| NetworkChange {
                    at_ms: t.at_s * 1000.0,
                    change: t.change.clone(),
                })
                .collect(),
            record_trace,
        }
    }
}
