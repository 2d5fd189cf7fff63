//! Deterministic discrete-event simulation of a VoIP path.
//!
//! All media and background flows share one bottleneck: a buffer (tail-drop,
//! RED or WRED) feeding a fixed-rate link with propagation latency and
//! independent Bernoulli loss. Media flows may add an access leg (extra
//! latency and loss), forward error correction and an IntServ service class.

mod fec;
mod packet;
mod queue;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fec::{expected_residual_loss, fec_recover, xor_parity, FecConfig, Recovered};
pub use packet::{FecTag, FlowRef, Packet};
pub use queue::{
    red_verdict, BottleneckQueue, Discipline, DropProfile, DropReason, OfferOutcome, QueueConfig, RedParams,
    Verdict, WredParams, DEFAULT_EWMA_WEIGHT, DEFAULT_MAX_P,
};
pub use world::{FiredChange, SimWorld, TraceEvent, TraceRecord, WorldConfig};

/// Smallest buffer the buffer-sizing mechanisms may configure.
pub const MIN_BUFFER_PKTS: usize = 10;
/// Largest buffer the access point supports ("maximum").
pub const MAX_BUFFER_PKTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetsimError {
    #[error("invalid link configuration: {0}")]
    InvalidLink(String),
    #[error("invalid queue configuration: {0}")]
    InvalidQueue(String),
    #[error("invalid flow configuration: {0}")]
    InvalidFlow(String),
    #[error("unknown media flow {0}")]
    UnknownFlow(FlowId),
    #[error("admission refused: {requested_kbps} kbps requested, {available_kbps} kbps unreserved")]
    AdmissionRefused { requested_kbps: f64, available_kbps: f64 },
    #[error("timeline is not sorted by activation time")]
    UnsortedTimeline,
}

/// Identifier of a media flow (one per call).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u32);

impl FlowId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for FlowId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub latency_ms: f64,
    pub loss_rate: f64,
    pub capacity_kbps: f64,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), NetsimError> {
        if !(self.latency_ms >= 0.0) {
            return Err(NetsimError::InvalidLink(format!("latency_ms {} < 0", self.latency_ms)));
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return Err(NetsimError::InvalidLink(format!("loss_rate {} outside [0, 1]", self.loss_rate)));
        }
        if !(self.capacity_kbps > 0.0) {
            return Err(NetsimError::InvalidLink(format!("capacity_kbps {} <= 0", self.capacity_kbps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServiceClass {
    #[default]
    BestEffort,
    /// Strict priority above best effort, no policing.
    ControlledLoad,
    /// Token-bucket reservation; non-conforming packets are policed under congestion.
    Guaranteed { reserved_kbps: f64, bucket_depth_pkts: f64 },
}

impl ServiceClass {
    pub fn reserved_kbps(&self) -> f64 {
        match self {
            ServiceClass::Guaranteed { reserved_kbps, .. } => *reserved_kbps,
            _ => 0.0,
        }
    }
}

fn default_rate() -> f64 {
    26.0
}
fn default_interval() -> f64 {
    20.0
}
fn default_media_priority() -> u8 {
    1
}
fn default_stall_prob() -> f64 {
    0.01
}
fn default_stall_ms() -> f64 {
    80.0
}
fn default_end() -> f64 {
    f64::INFINITY
}
fn is_unbounded(v: &f64) -> bool {
    v.is_infinite()
}

/// One media (call) flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaFlowConfig {
    #[serde(default = "default_rate")]
    pub rate_kbps: f64,
    #[serde(default = "default_interval")]
    pub packet_interval_ms: f64,
    #[serde(default = "default_media_priority")]
    pub priority: u8,
    #[serde(default)]
    pub service: ServiceClass,
    #[serde(default)]
    pub fec: Option<FecConfig>,
    #[serde(default)]
    pub start_ms: f64,
    #[serde(default = "default_end", skip_serializing_if = "is_unbounded")]
    pub end_ms: f64,
    /// Extra one-way latency of the caller's access leg.
    #[serde(default)]
    pub access_latency_ms: f64,
    /// Extra independent loss on the caller's access leg.
    #[serde(default)]
    pub access_loss: f64,
    /// Per-packet probability that the sender stalls and then releases a clump.
    #[serde(default = "default_stall_prob")]
    pub stall_prob: f64,
    #[serde(default = "default_stall_ms")]
    pub stall_ms: f64,
}

impl Default for MediaFlowConfig {
    fn default() -> Self {
        Self {
            rate_kbps: default_rate(),
            packet_interval_ms: default_interval(),
            priority: default_media_priority(),
            service: ServiceClass::BestEffort,
            fec: None,
            start_ms: 0.0,
            end_ms: f64::INFINITY,
            access_latency_ms: 0.0,
            access_loss: 0.0,
            stall_prob: default_stall_prob(),
            stall_ms: default_stall_ms(),
        }
    }
}

impl MediaFlowConfig {
    /// Payload-equivalent packet size in bytes.
    pub fn packet_bytes(&self) -> u32 {
        (self.rate_kbps * self.packet_interval_ms / 8.0).round().max(1.0) as u32
    }

    pub fn validate(&self, link: &LinkConfig) -> Result<(), NetsimError> {
        if !(self.rate_kbps > 0.0) || !(self.packet_interval_ms > 0.0) {
            return Err(NetsimError::InvalidFlow("rate and packet interval must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.access_loss) || !(0.0..=1.0).contains(&self.stall_prob) {
            return Err(NetsimError::InvalidFlow("probabilities must lie in [0, 1]".into()));
        }
        if self.access_latency_ms < 0.0 || self.stall_ms < 0.0 {
            return Err(NetsimError::InvalidFlow("durations must be >= 0".into()));
        }
        if self.end_ms < self.start_ms {
            return Err(NetsimError::InvalidFlow("end_ms precedes start_ms".into()));
        }
        if let Some(fec) = &self.fec {
            if !fec.is_valid() {
                return Err(NetsimError::InvalidFlow("FEC needs k >= 1 and exactly one parity".into()));
            }
        }
        if self.service.reserved_kbps() > link.capacity_kbps {
            return Err(NetsimError::AdmissionRefused {
                requested_kbps: self.service.reserved_kbps(),
                available_kbps: link.capacity_kbps,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrafficPattern {
    #[default]
    Cbr,
    Poisson,
    /// Sends at `rate * (on + off) / on` during on-periods, silent otherwise.
    OnOff { on_ms: f64, off_ms: f64 },
}

fn default_bg_bytes() -> u32 {
    100
}

/// Cross traffic sharing the bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundFlowConfig {
    pub rate_kbps: f64,
    #[serde(default = "default_bg_bytes")]
    pub packet_bytes: u32,
    #[serde(default)]
    pub pattern: TrafficPattern,
    #[serde(default)]
    pub priority: u8,
}

impl BackgroundFlowConfig {
    pub fn cbr(rate_kbps: f64) -> Self {
        Self {
            rate_kbps,
            packet_bytes: default_bg_bytes(),
            pattern: TrafficPattern::Cbr,
            priority: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        if !(self.rate_kbps >= 0.0) || self.packet_bytes == 0 {
            return Err(NetsimError::InvalidFlow("background rate must be >= 0 and packets non-empty".into()));
        }
        if let TrafficPattern::OnOff { on_ms, off_ms } = self.pattern {
            if !(on_ms > 0.0) || !(off_ms >= 0.0) {
                return Err(NetsimError::InvalidFlow("on/off periods must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ChangeKind {
    SetLatency { latency_ms: f64 },
    SetLossRate { loss_rate: f64 },
    SetBufferSize { capacity_pkts: usize },
    SetBackgroundRate {
        #[serde(default)]
        flow: usize,
        kbps: f64,
    },
}

impl ChangeKind {
    pub fn describe(&self) -> String {
        match self {
            ChangeKind::SetLatency { latency_ms } => format!("{latency_ms} ms latency"),
            ChangeKind::SetLossRate { loss_rate } => format!("{loss_rate} loss rate"),
            ChangeKind::SetBufferSize { capacity_pkts } => format!("buffer set to {capacity_pkts}"),
            ChangeKind::SetBackgroundRate { flow, kbps } => format!("background {flow} at {kbps} kbps"),
        }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        match *self {
            ChangeKind::SetLatency { latency_ms } if !(latency_ms >= 0.0) => {
                Err(NetsimError::InvalidLink(format!("latency_ms {latency_ms} < 0")))
            }
            ChangeKind::SetLossRate { loss_rate } if !(0.0..=1.0).contains(&loss_rate) => {
                Err(NetsimError::InvalidLink(format!("loss_rate {loss_rate} outside [0, 1]")))
            }
            ChangeKind::SetBufferSize { capacity_pkts: 0 } => {
                Err(NetsimError::InvalidQueue("capacity_pkts must be >= 1".into()))
            }
            ChangeKind::SetBackgroundRate { kbps, .. } if !(kbps >= 0.0) => {
                Err(NetsimError::InvalidFlow(format!("background rate {kbps} < 0")))
            }
            _ => Ok(()),
        }
    }
}

/// A scripted network change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkChange {
    pub at_ms: f64,
    pub change: ChangeKind,
}

/// Per-flow packet counters. Parity packets count like media packets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlowCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped_link: u64,
    pub dropped_queue: u64,
    pub dropped_policer: u64,
    /// Media packets rebuilt by FEC (they are also counted in a drop column).
    /// All columns include FEC parity packets.
    pub recovered: u64,
}

impl FlowCounters {
    pub fn dropped(&self) -> u64 {
        self.dropped_link + self.dropped_queue + self.dropped_policer
    }
}
