//! Built-in scenarios.

use super::scenario::{CallConfig, Profile, Scenario, TimelineEvent, SCENARIO_VERSION};
use crate::actions::ActionId;
use crate::netsim::{
    BackgroundFlowConfig, ChangeKind, Discipline, LinkConfig, QueueConfig, RedParams, TrafficPattern,
};

pub const PRESET_NAMES: &[&str] = &[
    "table1-s1",
    "table1-s2",
    "table1-s3",
    "table1-s4",
    "table7-singlecall",
    "multicall",
    "fig10-learning",
    "video",
    "red-1kbps",
    "red-10kbps",
];

/// Access-point link shared by the calls in the buffer experiments.
const AP_CAPACITY_KBPS: f64 = 256.0;
const BURST_ON_MS: f64 = 1000.0;
const BURST_OFF_MS: f64 = 1000.0;

fn bursty(rate_kbps: f64) -> BackgroundFlowConfig {
    BackgroundFlowConfig {
        rate_kbps,
        packet_bytes: 100,
        pattern: TrafficPattern::OnOff {
            on_ms: BURST_ON_MS,
            off_ms: BURST_OFF_MS,
        },
        priority: 0,
    }
}

fn at(at_s: f64, change: ChangeKind) -> TimelineEvent {
    TimelineEvent { at_s, change }
}

fn base(name: &str, duration_s: f64, link: LinkConfig, buffer: usize) -> Scenario {
    Scenario {
        version: SCENARIO_VERSION,
        name: name.to_string(),
        duration_s,
        window_s: 5.0,
        link,
        queue: QueueConfig::tail_drop(buffer),
        background: Vec::new(),
        calls: vec![CallConfig::default()],
        timeline: Vec::new(),
        learning: true,
        constraints: None,
    }
}

fn table1(name: &str, loss_rate: f64, buffer: usize) -> Scenario {
    let mut s = base(
        name,
        120.0,
        LinkConfig {
            latency_ms: 100.0,
            loss_rate,
            capacity_kbps: AP_CAPACITY_KBPS,
        },
        buffer,
    );
    s.background = vec![bursty(185.0)];
    s
}

fn red(name: &str, cbr_kbps: f64) -> Scenario {
    let mut s = base(
        name,
        120.0,
        LinkConfig {
            latency_ms: 5.0,
            loss_rate: 0.0,
            capacity_kbps: 1000.0,
        },
        200,
    );
    s.queue.discipline = Discipline::Red(RedParams::default());
    s.background = vec![
        BackgroundFlowConfig {
            rate_kbps: 960.0,
            packet_bytes: 100,
            pattern: TrafficPattern::Poisson,
            priority: 0,
        },
        BackgroundFlowConfig::cbr(cbr_kbps),
    ];
    s
}

fn table7() -> Scenario {
    let mut s = base(
        "table7-singlecall",
        600.0,
        LinkConfig {
            latency_ms: 6.0,
            loss_rate: 0.0,
            capacity_kbps: AP_CAPACITY_KBPS,
        },
        60,
    );
    s.background = vec![bursty(100.0)];
    s.timeline = vec![
        at(30.0, ChangeKind::SetLatency { latency_ms: 50.0 }),
        at(60.0, ChangeKind::SetLatency { latency_ms: 65.0 }),
        at(120.0, ChangeKind::SetLatency { latency_ms: 80.0 }),
        at(150.0, ChangeKind::SetLatency { latency_ms: 120.0 }),
        at(200.0, ChangeKind::SetBackgroundRate { flow: 0, kbps: 185.0 }),
        at(330.0, ChangeKind::SetLossRate { loss_rate: 0.01 }),
        at(450.0, ChangeKind::SetLossRate { loss_rate: 0.04 }),
    ];
    s
}

fn multicall() -> Scenario {
    let mut s = base(
        "multicall",
        300.0,
        LinkConfig {
            latency_ms: 4.0,
            loss_rate: 0.0,
            capacity_kbps: AP_CAPACITY_KBPS,
        },
        200,
    );
    s.calls = vec![
        CallConfig::default(),
        CallConfig {
            access_latency_ms: 20.0,
            ..CallConfig::default()
        },
    ];
    s.background = vec![bursty(60.0)];
    s.timeline = vec![
        at(60.0, ChangeKind::SetLatency { latency_ms: 60.0 }),
        at(90.0, ChangeKind::SetBackgroundRate { flow: 0, kbps: 180.0 }),
    ];
    s
}

fn fig10() -> Scenario {
    let mut s = base(
        "fig10-learning",
        600.0,
        LinkConfig {
            latency_ms: 40.0,
            loss_rate: 0.0,
            capacity_kbps: AP_CAPACITY_KBPS,
        },
        60,
    );
    s.calls = vec![
        CallConfig {
            end_s: Some(300.0),
            ..CallConfig::default()
        },
        CallConfig {
            start_s: 300.0,
            ..CallConfig::default()
        },
    ];
    s.background = vec![bursty(60.0)];
    let degrade = ChangeKind::SetLossRate { loss_rate: 0.08 };
    let reset = ChangeKind::SetLossRate { loss_rate: 0.0 };
    s.timeline = vec![
        at(60.0, degrade.clone()),
        at(120.0, reset.clone()),
        at(360.0, degrade),
        at(420.0, reset),
    ];
    s
}

fn video() -> Scenario {
    let mut s = base(
        "video",
        300.0,
        LinkConfig {
            latency_ms: 20.0,
            loss_rate: 0.0,
            capacity_kbps: 2000.0,
        },
        100,
    );
    s.calls = vec![CallConfig {
        profile: Profile::Video,
        ..CallConfig::default()
    }];
    s.timeline = vec![
        at(60.0, ChangeKind::SetLossRate { loss_rate: 0.03 }),
        at(120.0, ChangeKind::SetLossRate { loss_rate: 0.04 }),
        at(180.0, ChangeKind::SetLossRate { loss_rate: 0.06 }),
    ];
    s
}

/// Looks up a built-in scenario by name.
pub fn preset(name: &str) -> Option<Scenario> {
    Some(match name {
        "table1-s1" => table1(name, 0.0, 200),
        "table1-s2" => table1(name, 0.0, 20),
        "table1-s3" => table1(name, 0.30, 200),
        "table1-s4" => table1(name, 0.30, 20),
        "table7-singlecall" => table7(),
        "multicall" => multicall(),
        "fig10-learning" => fig10(),
        "video" => video(),
        "red-1kbps" => red(name, 1.0),
        "red-10kbps" => red(name, 10.0),
        _ => return None,
    })
}

/// A preset whose single call starts with `action` in force.
pub fn with_initial_action(mut s: Scenario, action: ActionId) -> Scenario {
    for c in &mut s.calls {
        c.initial_actions.push(action.clone());
    }
    s
}
