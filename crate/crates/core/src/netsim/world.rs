use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fec::{BlockState, FecConfig, PendingPacket};
use super::packet::{FecTag, FlowRef, Packet};
use super::queue::{BottleneckQueue, Discipline, QueueConfig, Verdict};
use super::{
    BackgroundFlowConfig, ChangeKind, FlowCounters, FlowId, LinkConfig, MediaFlowConfig, NetsimError, NetworkChange,
    ServiceClass, TrafficPattern, MAX_BUFFER_PKTS, MIN_BUFFER_PKTS,
};
use crate::metrics::HeuristicSample;

/// Everything needed to build a [`SimWorld`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub link: LinkConfig,
    pub queue: QueueConfig,
    #[serde(default)]
    pub media: Vec<MediaFlowConfig>,
    #[serde(default)]
    pub background: Vec<BackgroundFlowConfig>,
    #[serde(default)]
    pub timeline: Vec<NetworkChange>,
    /// Keep a per-packet event log of media packets.
    #[serde(default)]
    pub record_trace: bool,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), NetsimError> {
        self.link.validate()?;
        self.queue.validate()?;
        for m in &self.media {
            m.validate(&self.link)?;
        }
        let reserved: f64 = self.media.iter().map(|m| m.service.reserved_kbps()).sum();
        if reserved > self.link.capacity_kbps {
            return Err(NetsimError::AdmissionRefused {
                requested_kbps: reserved,
                available_kbps: self.link.capacity_kbps,
            });
        }
        for b in &self.background {
            b.validate()?;
        }
        for c in &self.timeline {
            c.change.validate()?;
            if let ChangeKind::SetBackgroundRate { flow, .. } = c.change {
                if flow >= self.background.len() {
                    return Err(NetsimError::InvalidFlow(format!("timeline names background flow {flow}")));
                }
            }
        }
        if self.timeline.windows(2).any(|w| w[0].at_ms > w[1].at_ms) {
            return Err(NetsimError::UnsortedTimeline);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    Sent,
    Delivered,
    DroppedLink,
    DroppedQueue,
    DroppedPolicer,
    Recovered,
}

impl TraceEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceEvent::Sent => "sent",
            TraceEvent::Delivered => "delivered",
            TraceEvent::DroppedLink => "dropped_link",
            TraceEvent::DroppedQueue => "dropped_queue",
            TraceEvent::DroppedPolicer => "dropped_policer",
            TraceEvent::Recovered => "recovered",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sent" => TraceEvent::Sent,
            "delivered" => TraceEvent::Delivered,
            "dropped_link" => TraceEvent::DroppedLink,
            "dropped_queue" => TraceEvent::DroppedQueue,
            "dropped_policer" => TraceEvent::DroppedPolicer,
            "recovered" => TraceEvent::Recovered,
            _ => return None,
        })
    }

    pub fn is_drop(self) -> bool {
        matches!(self, TraceEvent::DroppedLink | TraceEvent::DroppedQueue | TraceEvent::DroppedPolicer)
    }
}

/// One media-packet event (parity packets are not logged).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub time_ms: f64,
    pub flow: FlowId,
    pub event: TraceEvent,
    pub delay_ms: Option<f64>,
}

/// A network change that has taken effect.
#[derive(Debug, Clone, PartialEq)]
pub struct FiredChange {
    pub at_ms: f64,
    pub change: ChangeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fate {
    Delivered,
    Link,
    Queue,
    Policer,
}

#[derive(Debug)]
enum EventKind {
    MediaGen(usize),
    Offer(Packet),
    BgSend(usize),
    TxDone,
    Arrive(Packet),
    Change(usize),
}

#[derive(Debug)]
struct Event {
    at: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct WindowAcc {
    delay_sum: f64,
    delivered: u64,
    lost: u64,
}

#[derive(Debug)]
struct MediaState {
    cfg: MediaFlowConfig,
    bytes: u32,
    next_seq: u64,
    stall_until: f64,
    gen_rng: ChaCha8Rng,
    loss_rng: ChaCha8Rng,
    parity_rng: ChaCha8Rng,
    fec: Option<FecConfig>,
    fec_block: u64,
    fec_in_block: usize,
    blocks: BTreeMap<u64, BlockState>,
    service: ServiceClass,
    tokens: f64,
    tokens_at: f64,
    counters: FlowCounters,
    window: WindowAcc,
    last_delay: Option<f64>,
    buffer_delta: i64,
    aqm: Option<(u64, Discipline)>,
    finished: bool,
}

#[derive(Debug)]
struct BgState {
    cfg: BackgroundFlowConfig,
    rng: ChaCha8Rng,
    scheduled: bool,
    next_seq: u64,
    counters: FlowCounters,
}

/// The simulated network.
#[derive(Debug)]
pub struct SimWorld {
    clock: f64,
    seed: u64,
    link: LinkConfig,
    base_capacity: usize,
    base_discipline: Discipline,
    queue: BottleneckQueue,
    queue_rng: ChaCha8Rng,
    in_service: Option<Packet>,
    media: Vec<MediaState>,
    background: Vec<BgState>,
    timeline: Vec<NetworkChange>,
    fired: Vec<FiredChange>,
    events: BinaryHeap<Event>,
    event_seq: u64,
    aqm_seq: u64,
    record_trace: bool,
    trace: Vec<TraceRecord>,
    queue_wait_sum: f64,
    queue_wait_count: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl SimWorld {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self, NetsimError> {
        config.validate()?;
        let mut typical_bytes = 100.0;
        if let Some(m) = config.media.first() {
            typical_bytes = m.packet_bytes() as f64;
        }
        let typical_tx = typical_bytes * 8.0 / config.link.capacity_kbps;
        let media = config
            .media
            .iter()
            .enumerate()
            .map(|(i, cfg)| {
                let s = 100 + 3 * i as u64;
                MediaState {
                    bytes: cfg.packet_bytes(),
                    next_seq: 0,
                    stall_until: f64::NEG_INFINITY,
                    gen_rng: stream_rng(seed, s),
                    loss_rng: stream_rng(seed, s + 1),
                    parity_rng: stream_rng(seed, s + 2),
                    fec: cfg.fec,
                    fec_block: 0,
                    fec_in_block: 0,
                    blocks: BTreeMap::new(),
                    service: cfg.service,
                    tokens: 0.0,
                    tokens_at: cfg.start_ms,
                    counters: FlowCounters::default(),
                    window: WindowAcc::default(),
                    last_delay: None,
                    buffer_delta: 0,
                    aqm: None,
                    finished: false,
                    cfg: cfg.clone(),
                }
            })
            .collect();
        let background = config
            .background
            .iter()
            .enumerate()
            .map(|(j, cfg)| BgState {
                cfg: cfg.clone(),
                rng: stream_rng(seed, 10_000 + j as u64),
                scheduled: false,
                next_seq: 0,
                counters: FlowCounters::default(),
            })
            .collect();
        let mut world = Self {
            clock: 0.0,
            seed,
            link: config.link,
            base_capacity: config.queue.capacity_pkts,
            base_discipline: config.queue.discipline.clone(),
            queue: BottleneckQueue::new(&config.queue, typical_tx),
            queue_rng: stream_rng(seed, 1),
            in_service: None,
            media,
            background,
            timeline: config.timeline.clone(),
            fired: Vec::new(),
            events: BinaryHeap::new(),
            event_seq: 0,
            aqm_seq: 0,
            record_trace: config.record_trace,
            trace: Vec::new(),
            queue_wait_sum: 0.0,
            queue_wait_count: 0,
        };
        for i in 0..world.media.len() {
            let start = world.media[i].cfg.start_ms;
            let depth = world.bucket_depth_bytes(i);
            world.media[i].tokens = depth;
            world.push(start, EventKind::MediaGen(i));
        }
        for j in 0..world.background.len() {
            world.schedule_background(j, 0.0, true);
        }
        for k in 0..world.timeline.len() {
            let at = world.timeline[k].at_ms;
            world.push(at, EventKind::Change(k));
        }
        Ok(world)
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn link(&self) -> &LinkConfig {
        &self.link
    }

    pub fn media_count(&self) -> usize {
        self.media.len()
    }

    pub fn media_config(&self, flow: FlowId) -> Result<&MediaFlowConfig, NetsimError> {
        self.media_state(flow).map(|m| &m.cfg)
    }

    fn media_state(&self, flow: FlowId) -> Result<&MediaState, NetsimError> {
        self.media.get(flow.index()).ok_or(NetsimError::UnknownFlow(flow))
    }

    fn media_state_mut(&mut self, flow: FlowId) -> Result<&mut MediaState, NetsimError> {
        self.media.get_mut(flow.index()).ok_or(NetsimError::UnknownFlow(flow))
    }

    fn push(&mut self, at: f64, kind: EventKind) {
        self.event_seq += 1;
        self.events.push(Event {
            at,
            seq: self.event_seq,
            kind,
        });
    }

    /// Processes every event with timestamp <= `until_ms`, then sets the clock.
    pub fn advance(&mut self, until_ms: f64) {
        if until_ms < self.clock {
            return;
        }
        while let Some(ev) = self.events.peek() {
            if ev.at > until_ms {
                break;
            }
            let ev = self.events.pop().expect("peeked");
            self.clock = ev.at;
            self.handle(ev.kind);
        }
        self.clock = until_ms;
    }

    fn handle(&mut self, kind: EventKind) {
        match kind {
            EventKind::MediaGen(i) => self.on_media_gen(i),
            EventKind::Offer(pkt) => self.on_offer(pkt),
            EventKind::BgSend(j) => self.on_bg_send(j),
            EventKind::TxDone => self.on_tx_done(),
            EventKind::Arrive(pkt) => self.on_arrive(pkt),
            EventKind::Change(k) => {
                let change = self.timeline[k].change.clone();
                self.apply_network_change(&change);
            }
        }
    }

    fn on_media_gen(&mut self, i: usize) {
        let now = self.clock;
        let m = &mut self.media[i];
        if now >= m.cfg.end_ms {
            m.finished = true;
            self.close_fec_block(i);
            return;
        }
        let stall_draw: f64 = m.gen_rng.gen();
        if now >= m.stall_until && stall_draw < m.cfg.stall_prob {
            m.stall_until = now + m.cfg.stall_ms;
        }
        let send_at = now.max(m.stall_until);
        let loss_u: f64 = m.loss_rng.gen();
        let access_u: f64 = m.loss_rng.gen();
        let seq = m.next_seq;
        m.next_seq += 1;
        let mut fec_tag = None;
        let mut parity = None;
        if let Some(fec) = m.fec {
            let block = m.fec_block;
            let index = m.fec_in_block;
            fec_tag = Some(FecTag {
                block,
                index: index as u32,
                parity: false,
            });
            m.blocks.entry(block).or_default().data.push(PendingPacket {
                sent_at: send_at,
                delivered_at: None,
                resolved: false,
            });
            m.fec_in_block += 1;
            if m.fec_in_block == fec.block_k {
                let st = m.blocks.get_mut(&block).expect("block exists");
                st.expected_data = Some(fec.block_k);
                st.parity_sent = true;
                m.fec_block += 1;
                m.fec_in_block = 0;
                let p_seq = m.next_seq;
                m.next_seq += 1;
                parity = Some(Packet {
                    flow: FlowRef::Media(i),
                    seq: p_seq,
                    bytes: m.bytes,
                    sent_at: send_at,
                    band: 1,
                    priority: m.cfg.priority,
                    loss_u: m.parity_rng.gen(),
                    access_u: m.parity_rng.gen(),
                    fec: Some(FecTag {
                        block,
                        index: fec.block_k as u32,
                        parity: true,
                    }),
                });
            }
        }
        let pkt = Packet {
            flow: FlowRef::Media(i),
            seq,
            bytes: m.bytes,
            sent_at: send_at,
            band: 1,
            priority: m.cfg.priority,
            loss_u,
            access_u,
            fec: fec_tag,
        };
        let next = now + m.cfg.packet_interval_ms;
        self.push(send_at, EventKind::Offer(pkt));
        if let Some(p) = parity {
            self.push(send_at, EventKind::Offer(p));
        }
        self.push(next, EventKind::MediaGen(i));
    }

    fn bucket_depth_bytes(&self, i: usize) -> f64 {
        match self.media[i].service {
            ServiceClass::Guaranteed { bucket_depth_pkts, .. } => bucket_depth_pkts * self.media[i].bytes as f64,
            _ => 0.0,
        }
    }

    fn on_offer(&mut self, mut pkt: Packet) {
        let now = self.clock;
        match pkt.flow {
            FlowRef::Media(i) => {
                self.media[i].counters.sent += 1;
                if pkt.fec.is_none_or(|t| !t.parity) {
                    self.log(i, TraceEvent::Sent, None);
                }
                match self.media[i].service {
                    ServiceClass::BestEffort => pkt.band = 1,
                    ServiceClass::ControlledLoad => pkt.band = 0,
                    ServiceClass::Guaranteed { reserved_kbps, .. } => {
                        let depth = self.bucket_depth_bytes(i);
                        let m = &mut self.media[i];
                        m.tokens = (m.tokens + (now - m.tokens_at) * reserved_kbps / 8.0).min(depth);
                        m.tokens_at = now;
                        if m.tokens >= pkt.bytes as f64 {
                            m.tokens -= pkt.bytes as f64;
                            pkt.band = 0;
                        } else if self.queue.band_len(1) > 0 {
                            // non-conforming while best-effort traffic is waiting
                            self.media_fate(pkt, Fate::Policer);
                            return;
                        } else {
                            pkt.band = 1;
                        }
                    }
                }
            }
            FlowRef::Background(j) => {
                self.background[j].counters.sent += 1;
                pkt.band = 1;
            }
        }
        let out = self.queue.offer_packet(pkt, now, &mut self.queue_rng);
        if let Some(ev) = out.evicted {
            self.packet_fate(ev, Fate::Queue);
        }
        if let (Verdict::Dropped(_), Some(rej)) = (out.verdict, out.rejected) {
            self.packet_fate(rej, Fate::Queue);
        }
        if self.in_service.is_none() {
            self.start_tx();
        }
    }

    fn start_tx(&mut self) {
        let now = self.clock;
        if let Some(pkt) = self.queue.dequeue(now) {
            self.queue_wait_sum += now - pkt.sent_at;
            self.queue_wait_count += 1;
            let tx = pkt.bytes as f64 * 8.0 / self.link.capacity_kbps;
            self.in_service = Some(pkt);
            self.push(now + tx, EventKind::TxDone);
        }
    }

    fn on_tx_done(&mut self) {
        let Some(pkt) = self.in_service.take() else {
            return;
        };
        let now = self.clock;
        match pkt.flow {
            FlowRef::Media(i) => {
                let m = &self.media[i];
                if pkt.loss_u < self.link.loss_rate || pkt.access_u < m.cfg.access_loss {
                    self.media_fate(pkt, Fate::Link);
                } else {
                    let at = now + self.link.latency_ms + m.cfg.access_latency_ms;
                    self.push(at, EventKind::Arrive(pkt));
                }
            }
            FlowRef::Background(j) => {
                let bg = &mut self.background[j];
                if bg.rng.gen::<f64>() < self.link.loss_rate {
                    bg.counters.dropped_link += 1;
                } else {
                    // counted on departure; background latency is not observed
                    bg.counters.delivered += 1;
                }
            }
        }
        self.start_tx();
    }

    fn on_arrive(&mut self, pkt: Packet) {
        self.media_fate(pkt, Fate::Delivered);
    }

    fn packet_fate(&mut self, pkt: Packet, fate: Fate) {
        match pkt.flow {
            FlowRef::Media(_) => self.media_fate(pkt, fate),
            FlowRef::Background(j) => {
                let c = &mut self.background[j].counters;
                match fate {
                    Fate::Delivered => c.delivered += 1,
                    Fate::Link => c.dropped_link += 1,
                    Fate::Queue => c.dropped_queue += 1,
                    Fate::Policer => c.dropped_policer += 1,
                }
            }
        }
    }

    fn log(&mut self, i: usize, event: TraceEvent, delay_ms: Option<f64>) {
        if self.record_trace {
            self.trace.push(TraceRecord {
                time_ms: self.clock,
                flow: FlowId(i as u32),
                event,
                delay_ms,
            });
        }
    }

    fn media_fate(&mut self, pkt: Packet, fate: Fate) {
        let FlowRef::Media(i) = pkt.flow else {
            return;
        };
        let now = self.clock;
        let delay = now - pkt.sent_at;
        {
            let c = &mut self.media[i].counters;
            match fate {
                Fate::Delivered => c.delivered += 1,
                Fate::Link => c.dropped_link += 1,
                Fate::Queue => c.dropped_queue += 1,
                Fate::Policer => c.dropped_policer += 1,
            }
        }
        let delivered = fate == Fate::Delivered;
        match pkt.fec {
            Some(tag) if tag.parity => {
                if let Some(block) = self.media[i].blocks.get_mut(&tag.block) {
                    block.parity_fate = Some(delivered);
                }
                self.try_resolve_block(i, tag.block);
            }
            Some(tag) => {
                self.log_fate(i, fate, delay);
                if delivered {
                    self.window_delivered(i, delay);
                }
                if let Some(block) = self.media[i].blocks.get_mut(&tag.block) {
                    if let Some(p) = block.data.get_mut(tag.index as usize) {
                        p.resolved = true;
                        p.delivered_at = delivered.then_some(now);
                    }
                }
                self.try_resolve_block(i, tag.block);
            }
            None => {
                self.log_fate(i, fate, delay);
                if delivered {
                    self.window_delivered(i, delay);
                } else {
                    self.media[i].window.lost += 1;
                }
            }
        }
    }

    fn log_fate(&mut self, i: usize, fate: Fate, delay: f64) {
        let (event, d) = match fate {
            Fate::Delivered => (TraceEvent::Delivered, Some(delay)),
            Fate::Link => (TraceEvent::DroppedLink, None),
            Fate::Queue => (TraceEvent::DroppedQueue, None),
            Fate::Policer => (TraceEvent::DroppedPolicer, None),
        };
        self.log(i, event, d);
    }

    fn window_delivered(&mut self, i: usize, delay: f64) {
        let w = &mut self.media[i].window;
        w.delay_sum += delay;
        w.delivered += 1;
    }

    fn try_resolve_block(&mut self, i: usize, block: u64) {
        let complete = self.media[i].blocks.get(&block).is_some_and(|b| b.complete());
        if !complete {
            return;
        }
        let st = self.media[i].blocks.remove(&block).expect("present");
        let missing: Vec<&PendingPacket> = st.data.iter().filter(|p| p.delivered_at.is_none()).collect();
        if missing.len() == 1 && st.parity_fate == Some(true) {
            let delay = self.clock - missing[0].sent_at;
            self.media[i].counters.recovered += 1;
            self.log(i, TraceEvent::Recovered, Some(delay));
            self.window_delivered(i, delay);
        } else {
            self.media[i].window.lost += missing.len() as u64;
        }
    }

    /// Closes a partially filled FEC block (no parity will follow).
    fn close_fec_block(&mut self, i: usize) {
        let m = &mut self.media[i];
        if m.fec_in_block > 0 {
            let block = m.fec_block;
            if let Some(st) = m.blocks.get_mut(&block) {
                st.expected_data = Some(m.fec_in_block);
                st.parity_sent = false;
            }
            m.fec_block += 1;
            m.fec_in_block = 0;
            self.try_resolve_block(i, block);
        }
    }

    fn schedule_background(&mut self, j: usize, now: f64, first: bool) {
        let bg = &mut self.background[j];
        let rate = bg.cfg.rate_kbps;
        if rate <= 0.0 {
            bg.scheduled = false;
            return;
        }
        let bits = bg.cfg.packet_bytes as f64 * 8.0;
        let next = match bg.cfg.pattern {
            TrafficPattern::Cbr => {
                if first {
                    now
                } else {
                    now + bits / rate
                }
            }
            TrafficPattern::Poisson => {
                let u: f64 = bg.rng.gen();
                now - (1.0 - u).ln() * bits / rate
            }
            TrafficPattern::OnOff { on_ms, off_ms } => {
                let peak = rate * (on_ms + off_ms) / on_ms;
                let mut t = if first { now } else { now + bits / peak };
                let period = on_ms + off_ms;
                let phase = t.rem_euclid(period);
                if phase >= on_ms {
                    t += period - phase;
                }
                t
            }
        };
        bg.scheduled = true;
        self.push(next, EventKind::BgSend(j));
    }

    fn on_bg_send(&mut self, j: usize) {
        let now = self.clock;
        let bg = &mut self.background[j];
        if bg.cfg.rate_kbps <= 0.0 {
            bg.scheduled = false;
            return;
        }
        let pkt = Packet {
            flow: FlowRef::Background(j),
            seq: bg.next_seq,
            bytes: bg.cfg.packet_bytes,
            sent_at: now,
            band: 1,
            priority: bg.cfg.priority,
            loss_u: 1.0,
            access_u: 1.0,
            fec: None,
        };
        bg.next_seq += 1;
        self.on_offer(pkt);
        self.schedule_background(j, now, false);
    }

    /// Applies a network change now and records it for the controller.
    pub fn apply_network_change(&mut self, change: &ChangeKind) {
        let now = self.clock;
        match *change {
            ChangeKind::SetLatency { latency_ms } => self.link.latency_ms = latency_ms,
            ChangeKind::SetLossRate { loss_rate } => self.link.loss_rate = loss_rate,
            ChangeKind::SetBufferSize { capacity_pkts } => {
                self.base_capacity = capacity_pkts.max(1);
                self.refresh_queue();
            }
            ChangeKind::SetBackgroundRate { flow, kbps } => {
                if let Some(bg) = self.background.get_mut(flow) {
                    bg.cfg.rate_kbps = kbps;
                    if !bg.scheduled && kbps > 0.0 {
                        self.schedule_background(flow, now, true);
                    }
                }
            }
        }
        self.fired.push(FiredChange {
            at_ms: now,
            change: change.clone(),
        });
    }

    /// Changes that have taken effect so far, in order.
    pub fn fired_changes(&self) -> &[FiredChange] {
        &self.fired
    }

    fn refresh_queue(&mut self) {
        let delta: i64 = self.media.iter().map(|m| m.buffer_delta).sum();
        let mut capacity = (self.base_capacity as i64 + delta).max(1) as usize;
        let discipline = self
            .media
            .iter()
            .filter_map(|m| m.aqm.as_ref())
            .max_by_key(|(seq, _)| *seq)
            .map(|(_, d)| d.clone())
            .unwrap_or_else(|| self.base_discipline.clone());
        capacity = capacity.max(discipline.required_capacity());
        if *self.queue.discipline() != discipline {
            self.queue.set_discipline(discipline);
        }
        let trimmed = self.queue.set_capacity(capacity);
        for p in trimmed {
            self.packet_fate(p, Fate::Queue);
        }
    }

    /// Queue configuration currently in force.
    pub fn effective_queue_config(&self) -> QueueConfig {
        QueueConfig {
            capacity_pkts: self.queue.capacity(),
            discipline: self.queue.discipline().clone(),
        }
    }

    pub fn base_buffer(&self) -> usize {
        self.base_capacity
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Moves the shared buffer by up to `step` packets on behalf of a call,
    /// staying within [`MIN_BUFFER_PKTS`, `MAX_BUFFER_PKTS`]. Returns the
    /// step actually applied.
    pub fn adjust_buffer(&mut self, flow: FlowId, step: i64) -> Result<i64, NetsimError> {
        self.media_state(flow)?;
        let delta: i64 = self.media.iter().map(|m| m.buffer_delta).sum();
        let current = self.base_capacity as i64 + delta;
        let target = (current + step).clamp(MIN_BUFFER_PKTS as i64, MAX_BUFFER_PKTS as i64);
        let applied = if step >= 0 { (target - current).max(0) } else { (target - current).min(0) };
        self.media[flow.index()].buffer_delta += applied;
        self.refresh_queue();
        Ok(applied)
    }

    pub fn buffer_delta(&self, flow: FlowId) -> Result<i64, NetsimError> {
        self.media_state(flow).map(|m| m.buffer_delta)
    }

    /// Reverts a call's buffer adjustments.
    pub fn reset_buffer_delta(&mut self, flow: FlowId) -> Result<i64, NetsimError> {
        let old = std::mem::take(&mut self.media_state_mut(flow)?.buffer_delta);
        self.refresh_queue();
        Ok(old)
    }

    /// Installs (or removes) the queue discipline a call asked for. The most
    /// recently installed discipline governs the shared buffer.
    pub fn set_flow_aqm(&mut self, flow: FlowId, discipline: Option<Discipline>) -> Result<(), NetsimError> {
        if let Some(d) = &discipline {
            d.validate()?;
        }
        self.aqm_seq += 1;
        let seq = self.aqm_seq;
        self.media_state_mut(flow)?.aqm = discipline.map(|d| (seq, d));
        self.refresh_queue();
        Ok(())
    }

    pub fn flow_aqm(&self, flow: FlowId) -> Result<Option<&Discipline>, NetsimError> {
        self.media_state(flow).map(|m| m.aqm.as_ref().map(|(_, d)| d))
    }

    pub fn set_fec(&mut self, flow: FlowId, fec: Option<FecConfig>) -> Result<(), NetsimError> {
        if let Some(f) = &fec {
            if !f.is_valid() {
                return Err(NetsimError::InvalidFlow("FEC needs k >= 1 and exactly one parity".into()));
            }
        }
        let i = flow.index();
        self.media_state(flow)?;
        if self.media[i].fec == fec {
            return Ok(());
        }
        self.close_fec_block(i);
        self.media[i].fec = fec;
        Ok(())
    }

    pub fn fec(&self, flow: FlowId) -> Result<Option<FecConfig>, NetsimError> {
        self.media_state(flow).map(|m| m.fec)
    }

    pub fn service_class(&self, flow: FlowId) -> Result<ServiceClass, NetsimError> {
        self.media_state(flow).map(|m| m.service)
    }

    /// Sum of Guaranteed reservations, optionally excluding one flow.
    pub fn reserved_kbps(&self, except: Option<FlowId>) -> f64 {
        self.media
            .iter()
            .enumerate()
            .filter(|(i, _)| except.is_none_or(|f| f.index() != *i))
            .map(|(_, m)| m.service.reserved_kbps())
            .sum()
    }

    /// Link capacity not yet reserved by Guaranteed flows.
    pub fn headroom_kbps(&self) -> f64 {
        self.link.capacity_kbps - self.reserved_kbps(None)
    }

    /// Sets a flow's service class, running admission control for reservations.
    pub fn configure_service_class(&mut self, flow: FlowId, class: ServiceClass) -> Result<(), NetsimError> {
        self.media_state(flow)?;
        if let ServiceClass::Guaranteed {
            reserved_kbps,
            bucket_depth_pkts,
        } = class
        {
            if !(reserved_kbps > 0.0) || !(bucket_depth_pkts >= 1.0) {
                return Err(NetsimError::InvalidFlow("reservation needs rate > 0 and depth >= 1".into()));
            }
            let available = self.link.capacity_kbps - self.reserved_kbps(Some(flow));
            if reserved_kbps > available + 1e-9 {
                return Err(NetsimError::AdmissionRefused {
                    requested_kbps: reserved_kbps,
                    available_kbps: available,
                });
            }
        }
        let i = flow.index();
        self.media[i].service = class;
        self.media[i].tokens = self.bucket_depth_bytes(i);
        self.media[i].tokens_at = self.clock;
        Ok(())
    }

    pub fn counters(&self, flow: FlowId) -> Result<FlowCounters, NetsimError> {
        self.media_state(flow).map(|m| m.counters)
    }

    pub fn background_counters(&self, j: usize) -> Option<FlowCounters> {
        self.background.get(j).map(|b| b.counters)
    }

    /// Media packets of `flow` currently in the network, found by scanning the
    /// buffer, the transmitter and scheduled arrivals.
    pub fn in_flight_scan(&self, flow: FlowId) -> u64 {
        let is_flow = |p: &Packet| p.flow == FlowRef::Media(flow.index());
        let queued = self.queue.packets().filter(|p| is_flow(p)).count();
        let serving = self.in_service.as_ref().filter(|p| is_flow(p)).is_some() as usize;
        let propagating = self
            .events
            .iter()
            .filter(|e| matches!(&e.kind, EventKind::Arrive(p) if is_flow(p)))
            .count();
        (queued + serving + propagating) as u64
    }

    /// Mean time packets waited in the buffer before transmission.
    pub fn mean_queue_wait_ms(&self) -> f64 {
        if self.queue_wait_count == 0 {
            0.0
        } else {
            self.queue_wait_sum / self.queue_wait_count as f64
        }
    }

    pub fn total_queue_drops(&self) -> u64 {
        self.media.iter().map(|m| m.counters.dropped_queue).sum::<u64>()
            + self.background.iter().map(|b| b.counters.dropped_queue).sum::<u64>()
    }

    /// Drains the measurement accumulator of a flow. `None` means no media
    /// packet reached a final fate since the previous call.
    pub fn measure(&mut self, flow: FlowId) -> Result<Option<HeuristicSample>, NetsimError> {
        let latency = self.link.latency_ms;
        let m = self.media_state_mut(flow)?;
        let w = std::mem::take(&mut m.window);
        if w.delivered == 0 && w.lost == 0 {
            return Ok(None);
        }
        let delay = if w.delivered > 0 {
            w.delay_sum / w.delivered as f64
        } else {
            m.last_delay.unwrap_or(latency + m.cfg.access_latency_ms)
        };
        m.last_delay = Some(delay);
        let loss = w.lost as f64 / (w.delivered + w.lost) as f64;
        Ok(Some(
            HeuristicSample::from_measurement(delay, loss).expect("measured values are in range"),
        ))
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn is_flow_active(&self, flow: FlowId) -> bool {
        self.media
            .get(flow.index())
            .is_some_and(|m| self.clock >= m.cfg.start_ms && self.clock < m.cfg.end_ms && !m.finished)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_flow(latency: f64, loss: f64) -> WorldConfig {
        WorldConfig {
            link: LinkConfig {
                latency_ms: latency,
                loss_rate: loss,
                capacity_kbps: 100_000.0,
            },
            queue: QueueConfig::tail_drop(200),
            media: vec![MediaFlowConfig::default()],
            background: vec![],
            timeline: vec![],
            record_trace: true,
        }
    }

    #[test]
    fn advancing_by_zero_is_identity() {
        let mut w = SimWorld::new(one_flow(100.0, 0.0), 1).unwrap();
        w.advance(1000.0);
        let before = (w.counters(FlowId(0)).unwrap(), w.trace().len(), w.clock());
        w.advance(1000.0);
        assert_eq!(before, (w.counters(FlowId(0)).unwrap(), w.trace().len(), w.clock()));
    }

    #[test]
    fn uncongested_pass_through() {
        let mut w = SimWorld::new(one_flow(100.0, 0.0), 3).unwrap();
        w.advance(10_000.0);
        let s = w.measure(FlowId(0)).unwrap().unwrap();
        // serialization of 65 bytes at 100 Mbps adds ~5 µs
        assert!((s.delay_ms - 100.0).abs() < 0.01, "{}", s.delay_ms);
        assert_eq!(s.loss, 0.0);
        assert!(w.measure(FlowId(0)).unwrap().is_none());
    }

    #[test]
    fn latency_change_shifts_delay() {
        let mut cfg = one_flow(50.0, 0.0);
        cfg.timeline.push(NetworkChange {
            at_ms: 5_000.0,
            change: ChangeKind::SetLatency { latency_ms: 65.0 },
        });
        let mut w = SimWorld::new(cfg, 1).unwrap();
        w.advance(4_000.0);
        let before = w.measure(FlowId(0)).unwrap().unwrap().delay_ms;
        w.advance(6_000.0);
        w.measure(FlowId(0)).unwrap();
        w.advance(10_000.0);
        let after = w.measure(FlowId(0)).unwrap().unwrap().delay_ms;
        assert!((after - before - 15.0).abs() < 0.01);
        assert_eq!(w.fired_changes().len(), 1);
    }

    #[test]
    fn buffer_resize_to_same_size_is_noop() {
        let mut w = SimWorld::new(one_flow(10.0, 0.0), 1).unwrap();
        w.advance(2_000.0);
        let before = w.total_queue_drops();
        w.apply_network_change(&ChangeKind::SetBufferSize { capacity_pkts: 200 });
        assert_eq!(w.total_queue_drops(), before);
        assert_eq!(w.effective_queue_config().capacity_pkts, 200);
    }

    #[test]
    fn guaranteed_admission_is_refused_when_oversubscribed() {
        let mut cfg = one_flow(10.0, 0.0);
        cfg.link.capacity_kbps = 100.0;
        cfg.media.push(MediaFlowConfig::default());
        let mut w = SimWorld::new(cfg, 1).unwrap();
        let class = ServiceClass::Guaranteed {
            reserved_kbps: 60.0,
            bucket_depth_pkts: 2.0,
        };
        w.configure_service_class(FlowId(0), class).unwrap();
        let err = w.configure_service_class(FlowId(1), class).unwrap_err();
        assert!(matches!(err, NetsimError::AdmissionRefused { .. }));
        w.configure_service_class(FlowId(0), ServiceClass::BestEffort).unwrap();
        w.configure_service_class(FlowId(1), class).unwrap();
    }

    #[test]
    fn buffer_adjustments_are_clamped() {
        let mut cfg = one_flow(10.0, 0.0);
        cfg.queue = QueueConfig::tail_drop(20);
        let mut w = SimWorld::new(cfg, 1).unwrap();
        assert_eq!(w.adjust_buffer(FlowId(0), -15).unwrap(), -10);
        assert_eq!(w.effective_queue_config().capacity_pkts, 10);
        assert_eq!(w.adjust_buffer(FlowId(0), -15).unwrap(), 0);
        assert_eq!(w.reset_buffer_delta(FlowId(0)).unwrap(), -10);
        assert_eq!(w.effective_queue_config().capacity_pkts, 20);
    }

    #[test]
    fn red_raises_buffer_to_its_max_threshold() {
        let mut cfg = one_flow(10.0, 0.0);
        cfg.queue = QueueConfig::tail_drop(60);
        let mut w = SimWorld::new(cfg, 1).unwrap();
        w.set_flow_aqm(FlowId(0), Some(Discipline::Red(super::super::RedParams::default()))).unwrap();
        let q = w.effective_queue_config();
        assert_eq!(q.capacity_pkts, 100);
        assert_eq!(q.discipline.name(), "red");
        w.set_flow_aqm(FlowId(0), None).unwrap();
        assert_eq!(w.effective_queue_config(), QueueConfig::tail_drop(60));
    }
}
