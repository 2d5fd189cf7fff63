//! Bottleneck buffer with tail-drop, RED and WRED admission.
//!
//! The buffer holds two strict-priority bands sharing one packet budget.
//! Band 0 carries reserved/priority media, band 1 best-effort traffic. Active
//! queue management only judges best-effort arrivals; a priority arrival that
//! finds the buffer full pushes out the newest best-effort packet.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::packet::Packet;
use super::NetsimError;

pub const DEFAULT_EWMA_WEIGHT: f64 = 0.002;
pub const DEFAULT_MAX_P: f64 = 0.1;

/// Thresholds of one RED drop curve (packets).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropProfile {
    pub min_th: f64,
    pub max_th: f64,
    pub max_p: f64,
}

impl DropProfile {
    /// Early-drop probability for an average queue length.
    pub fn drop_probability(&self, avg: f64) -> f64 {
        if avg < self.min_th {
            0.0
        } else if avg > self.max_th {
            1.0
        } else {
            self.max_p * (avg - self.min_th) / (self.max_th - self.min_th)
        }
    }

    fn validate(&self) -> Result<(), NetsimError> {
        if !(self.min_th >= 0.0 && self.min_th < self.max_th) {
            return Err(NetsimError::InvalidQueue(format!(
                "RED thresholds need 0 <= min_th < max_th, got {} / {}",
                self.min_th, self.max_th
            )));
        }
        if !(self.max_p > 0.0 && self.max_p <= 1.0) {
            return Err(NetsimError::InvalidQueue(format!(
                "max_p must lie in (0, 1], got {}",
                self.max_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedParams {
    pub min_th: f64,
    pub max_th: f64,
    pub max_p: f64,
    #[serde(default = "default_ewma")]
    pub ewma_weight: f64,
}

fn default_ewma() -> f64 {
    DEFAULT_EWMA_WEIGHT
}

impl RedParams {
    pub fn new(min_th: f64, max_th: f64, max_p: f64) -> Self {
        Self {
            min_th,
            max_th,
            max_p,
            ewma_weight: DEFAULT_EWMA_WEIGHT,
        }
    }

    pub fn profile(&self) -> DropProfile {
        DropProfile {
            min_th: self.min_th,
            max_th: self.max_th,
            max_p: self.max_p,
        }
    }
}

impl Default for RedParams {
    fn default() -> Self {
        Self::new(50.0, 100.0, DEFAULT_MAX_P)
    }
}

/// Weighted RED: one drop curve per priority class over a shared average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WredParams {
    #[serde(default = "default_ewma")]
    pub ewma_weight: f64,
    /// Indexed by flow priority; priorities beyond the table use the last entry.
    pub profiles: Vec<DropProfile>,
}

impl Default for WredParams {
    fn default() -> Self {
        Self {
            ewma_weight: DEFAULT_EWMA_WEIGHT,
            profiles: vec![
                // background / lowest priority: dropped early and hard
                DropProfile {
                    min_th: 10.0,
                    max_th: 30.0,
                    max_p: 0.2,
                },
                // media
                DropProfile {
                    min_th: 30.0,
                    max_th: 60.0,
                    max_p: 0.02,
                },
            ],
        }
    }
}

impl WredParams {
    pub fn profile_for(&self, priority: u8) -> DropProfile {
        let i = (priority as usize).min(self.profiles.len().saturating_sub(1));
        self.profiles[i]
    }

    pub fn max_threshold(&self) -> f64 {
        self.profiles.iter().map(|p| p.max_th).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Discipline {
    #[default]
    TailDrop,
    Red(RedParams),
    Wred(WredParams),
}

impl Discipline {
    pub fn name(&self) -> &'static str {
        match self {
            Discipline::TailDrop => "tail_drop",
            Discipline::Red(_) => "red",
            Discipline::Wred(_) => "wred",
        }
    }

    /// Largest threshold the discipline needs the buffer to hold.
    pub fn required_capacity(&self) -> usize {
        match self {
            Discipline::TailDrop => 1,
            Discipline::Red(p) => p.max_th.ceil() as usize,
            Discipline::Wred(p) => p.max_threshold().ceil() as usize,
        }
    }

    fn ewma_weight(&self) -> f64 {
        match self {
            Discipline::TailDrop => DEFAULT_EWMA_WEIGHT,
            Discipline::Red(p) => p.ewma_weight,
            Discipline::Wred(p) => p.ewma_weight,
        }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        let w = self.ewma_weight();
        if !(w > 0.0 && w <= 1.0) {
            return Err(NetsimError::InvalidQueue(format!(
                "ewma_weight must lie in (0, 1], got {w}"
            )));
        }
        match self {
            Discipline::TailDrop => Ok(()),
            Discipline::Red(p) => p.profile().validate(),
            Discipline::Wred(p) => {
                if p.profiles.is_empty() {
                    return Err(NetsimError::InvalidQueue("WRED needs at least one profile".into()));
                }
                p.profiles.iter().try_for_each(DropProfile::validate)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub capacity_pkts: usize,
    #[serde(default)]
    pub discipline: Discipline,
}

impl QueueConfig {
    pub fn tail_drop(capacity_pkts: usize) -> Self {
        Self {
            capacity_pkts,
            discipline: Discipline::TailDrop,
        }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        if self.capacity_pkts == 0 {
            return Err(NetsimError::InvalidQueue("capacity_pkts must be >= 1".into()));
        }
        self.discipline.validate()?;
        if self.discipline.required_capacity() > self.capacity_pkts {
            return Err(NetsimError::InvalidQueue(format!(
                "max threshold {} exceeds capacity {}",
                self.discipline.required_capacity(),
                self.capacity_pkts
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Buffer full.
    Overflow,
    /// RED average above the maximum threshold.
    Forced,
    /// Probabilistic early drop.
    Early,
    /// Evicted by a priority arrival.
    Pushout,
    /// Trimmed after a buffer shrink.
    Resize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Enqueued,
    Dropped(DropReason),
}

#[derive(Debug)]
pub struct OfferOutcome {
    pub verdict: Verdict,
    /// Packet evicted to make room for a priority arrival.
    pub evicted: Option<Packet>,
    /// The offered packet, handed back when it was dropped.
    pub rejected: Option<Packet>,
}

/// RED admission for one arrival given the (already updated) average.
pub fn red_verdict(profile: &DropProfile, avg: f64, uniform: f64) -> Verdict {
    if avg > profile.max_th {
        Verdict::Dropped(DropReason::Forced)
    } else if uniform < profile.drop_probability(avg) {
        Verdict::Dropped(DropReason::Early)
    } else {
        Verdict::Enqueued
    }
}

/// Live queue state.
#[derive(Debug)]
pub struct BottleneckQueue {
    bands: [VecDeque<Packet>; 2],
    capacity: usize,
    discipline: Discipline,
    avg: f64,
    idle_since: Option<f64>,
    /// Transmission time of a typical packet, used to age the average over idle periods.
    typical_tx_ms: f64,
}

impl BottleneckQueue {
    pub fn new(config: &QueueConfig, typical_tx_ms: f64) -> Self {
        Self {
            bands: [VecDeque::new(), VecDeque::new()],
            capacity: config.capacity_pkts,
            discipline: config.discipline.clone(),
            avg: 0.0,
            idle_since: Some(0.0),
            typical_tx_ms,
        }
    }

    pub fn len(&self) -> usize {
        self.bands[0].len() + self.bands[1].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn band_len(&self, band: usize) -> usize {
        self.bands[band].len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn discipline(&self) -> &Discipline {
        &self.discipline
    }

    pub fn average(&self) -> f64 {
        self.avg
    }

    #[cfg(test)]
    pub(crate) fn set_average(&mut self, avg: f64) {
        self.avg = avg;
        self.idle_since = None;
    }

    pub fn set_typical_tx_ms(&mut self, ms: f64) {
        self.typical_tx_ms = ms;
    }

    pub fn set_discipline(&mut self, discipline: Discipline) {
        self.discipline = discipline;
    }

    /// Changes the packet budget, returning packets trimmed from the tail
    /// (best-effort band first).
    pub fn set_capacity(&mut self, capacity: usize) -> Vec<Packet> {
        self.capacity = capacity.max(1);
        let mut trimmed = Vec::new();
        while self.len() > self.capacity {
            let band = if self.bands[1].is_empty() { 0 } else { 1 };
            if let Some(p) = self.bands[band].pop_back() {
                trimmed.push(p);
            }
        }
        trimmed
    }

    pub fn packets(&self) -> impl Iterator<Item = &Packet> {
        self.bands[0].iter().chain(self.bands[1].iter())
    }

    fn update_average(&mut self, now_ms: f64) {
        let w = self.discipline.ewma_weight();
        if let Some(since) = self.idle_since.take() {
            if self.typical_tx_ms > 0.0 {
                let slots = ((now_ms - since) / self.typical_tx_ms).max(0.0);
                self.avg *= (1.0 - w).powf(slots);
            }
        }
        self.avg = (1.0 - w) * self.avg + w * self.len() as f64;
    }

    /// Admission decision for one arrival.
    pub fn offer_packet<R: Rng + ?Sized>(&mut self, pkt: Packet, now_ms: f64, rng: &mut R) -> OfferOutcome {
        let was_empty = self.is_empty();
        if !was_empty {
            self.idle_since = None;
        }
        self.update_average(now_ms);
        let band = pkt.band as usize;

        if band == 1 {
            let verdict = match &self.discipline {
                Discipline::TailDrop => Verdict::Enqueued,
                Discipline::Red(p) => red_verdict(&p.profile(), self.avg, rng.gen::<f64>()),
                Discipline::Wred(p) => red_verdict(&p.profile_for(pkt.priority), self.avg, rng.gen::<f64>()),
            };
            if let Verdict::Dropped(_) = verdict {
                self.restore_idle(was_empty, now_ms);
                return OfferOutcome {
                    verdict,
                    evicted: None,
                    rejected: Some(pkt),
                };
            }
        }

        let mut evicted = None;
        if self.len() >= self.capacity {
            if band == 0 && !self.bands[1].is_empty() {
                evicted = self.bands[1].pop_back();
            } else {
                self.restore_idle(was_empty, now_ms);
                return OfferOutcome {
                    verdict: Verdict::Dropped(DropReason::Overflow),
                    evicted: None,
                    rejected: Some(pkt),
                };
            }
        }
        self.bands[band].push_back(pkt);
        OfferOutcome {
            verdict: Verdict::Enqueued,
            evicted,
            rejected: None,
        }
    }

    fn restore_idle(&mut self, was_empty: bool, now_ms: f64) {
        if was_empty {
            self.idle_since = Some(now_ms);
        }
    }

    /// Next packet to transmit (priority band first).
    pub fn dequeue(&mut self, now_ms: f64) -> Option<Packet> {
        let pkt = self.bands[0].pop_front().or_else(|| self.bands[1].pop_front());
        if self.is_empty() {
            self.idle_since = Some(now_ms);
        }
        pkt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::packet::{FlowRef, Packet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pkt(band: u8, seq: u64) -> Packet {
        Packet {
            flow: FlowRef::Background(0),
            seq,
            bytes: 100,
            sent_at: 0.0,
            band,
            priority: 0,
            loss_u: 1.0,
            access_u: 1.0,
            fec: None,
        }
    }

    fn red_queue() -> BottleneckQueue {
        let cfg = QueueConfig {
            capacity_pkts: 200,
            discipline: Discipline::Red(RedParams::new(50.0, 100.0, 0.1)),
        };
        BottleneckQueue::new(&cfg, 1.0)
    }

    #[test]
    fn red_below_min_threshold_enqueues() {
        let mut q = red_queue();
        q.set_average(40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = q.offer_packet(pkt(1, 0), 0.0, &mut rng);
        assert_eq!(out.verdict, Verdict::Enqueued);
        assert_eq!(RedParams::new(50.0, 100.0, 0.1).profile().drop_probability(40.0), 0.0);
    }

    #[test]
    fn red_above_max_threshold_forces_drop() {
        let mut q = red_queue();
        q.set_average(120.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = q.offer_packet(pkt(1, 0), 0.0, &mut rng);
        assert_eq!(out.verdict, Verdict::Dropped(DropReason::Forced));
    }

    #[test]
    fn red_interpolates_between_thresholds() {
        let prof = RedParams::new(50.0, 100.0, 0.1).profile();
        // 0.1 * (75 - 50) / (100 - 50)
        assert!((prof.drop_probability(75.0) - 0.05).abs() < 1e-15);
        assert_eq!(prof.drop_probability(49.999), 0.0);
        assert_eq!(prof.drop_probability(100.5), 1.0);
        assert!((prof.drop_probability(100.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn red_realized_drop_rate_within_three_sigma() {
        let prof = RedParams::new(50.0, 100.0, 0.1).profile();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let avg = 75.0;
        let drops = (0..n)
            .filter(|_| matches!(red_verdict(&prof, avg, rng.gen()), Verdict::Dropped(_)))
            .count() as f64;
        let p = 0.05;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((drops - n as f64 * p).abs() <= 3.0 * sigma, "drops {drops}");
    }

    #[test]
    fn tail_drop_drops_only_when_full() {
        let mut q = BottleneckQueue::new(&QueueConfig::tail_drop(3), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..3 {
            assert_eq!(q.offer_packet(pkt(1, i), 0.0, &mut rng).verdict, Verdict::Enqueued);
        }
        let out = q.offer_packet(pkt(1, 3), 0.0, &mut rng);
        assert_eq!(out.verdict, Verdict::Dropped(DropReason::Overflow));
        assert_eq!(out.rejected.unwrap().seq, 3);
    }

    #[test]
    fn priority_arrival_pushes_out_best_effort() {
        let mut q = BottleneckQueue::new(&QueueConfig::tail_drop(2), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        q.offer_packet(pkt(1, 0), 0.0, &mut rng);
        q.offer_packet(pkt(1, 1), 0.0, &mut rng);
        let out = q.offer_packet(pkt(0, 2), 0.0, &mut rng);
        assert_eq!(out.verdict, Verdict::Enqueued);
        assert_eq!(out.evicted.unwrap().seq, 1);
        assert_eq!(q.dequeue(0.0).unwrap().seq, 2);
        assert_eq!(q.dequeue(0.0).unwrap().seq, 0);
    }

    #[test]
    fn shrinking_trims_best_effort_tail_first() {
        let mut q = BottleneckQueue::new(&QueueConfig::tail_drop(5), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        q.offer_packet(pkt(0, 0), 0.0, &mut rng);
        for i in 1..5 {
            q.offer_packet(pkt(1, i), 0.0, &mut rng);
        }
        let trimmed = q.set_capacity(2);
        let seqs: Vec<u64> = trimmed.iter().map(|p| p.seq).collect();
        assert_eq!(seqs, vec![4, 3, 2]);
        assert_eq!(q.len(), 2);
        assert!(q.set_capacity(2).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(QueueConfig::tail_drop(0).validate().is_err());
        let bad = QueueConfig {
            capacity_pkts: 80,
            discipline: Discipline::Red(RedParams::new(50.0, 100.0, 0.1)),
        };
        assert!(bad.validate().is_err());
        let bad = QueueConfig {
            capacity_pkts: 200,
            discipline: Discipline::Red(RedParams::new(60.0, 50.0, 0.1)),
        };
        assert!(bad.validate().is_err());
        let ok = QueueConfig {
            capacity_pkts: 100,
            discipline: Discipline::Red(RedParams::default()),
        };
        assert!(ok.validate().is_ok());
    }
}
