mod common;

use proptest::prelude::*;
use qosearch_core::actions::{ActionId, ActionKind};
use qosearch_core::controller::check_global;
use qosearch_core::knowledge::{HEstimate, KnowledgeBase, ScenarioCase};
use qosearch_core::metrics::{estimate_mos, update_window, Constraints, HeuristicSample, WindowStats};
use qosearch_core::netsim::{
    BackgroundFlowConfig, FecConfig, FlowId, LinkConfig, MediaFlowConfig, QueueConfig, SimWorld, TrafficPattern,
    WorldConfig,
};

fn bursty_world(buffer: usize, loss_rate: f64, fec: Option<FecConfig>) -> WorldConfig {
    WorldConfig {
        link: LinkConfig {
            latency_ms: 100.0,
            loss_rate,
            capacity_kbps: 256.0,
        },
        queue: QueueConfig::tail_drop(buffer),
        media: vec![MediaFlowConfig {
            fec,
            ..MediaFlowConfig::default()
        }],
        background: vec![BackgroundFlowConfig {
            rate_kbps: 170.0,
            packet_bytes: 100,
            pattern: TrafficPattern::OnOff {
                on_ms: 1000.0,
                off_ms: 1000.0,
            },
            priority: 0,
        }],
        timeline: Vec::new(),
        record_trace: false,
    }
}

fn lossy_world(loss_rate: f64, fec: Option<FecConfig>) -> WorldConfig {
    WorldConfig {
        link: LinkConfig {
            latency_ms: 20.0,
            loss_rate,
            capacity_kbps: 10_000.0,
        },
        queue: QueueConfig::tail_drop(200),
        media: vec![MediaFlowConfig {
            fec,
            stall_prob: 0.0,
            ..MediaFlowConfig::default()
        }],
        background: Vec::new(),
        timeline: Vec::new(),
        record_trace: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn packets_are_conserved(seed in any::<u64>(), buffer in 10usize..200, loss in 0.0f64..0.4, stops in proptest::collection::vec(1.0f64..4000.0, 1..6)) {
        let mut w = SimWorld::new(bursty_world(buffer, loss, None), seed).unwrap();
        let mut t = 0.0;
        for dt in stops {
            t += dt;
            w.advance(t);
            let c = w.counters(FlowId(0)).unwrap();
            prop_assert_eq!(c.sent, c.delivered + c.dropped() + w.in_flight_scan(FlowId(0)));
        }
    }

    #[test]
    fn identical_seeds_give_identical_histories(seed in any::<u64>(), loss in 0.0f64..0.4) {
        let mut cfg = bursty_world(30, loss, None);
        cfg.record_trace = true;
        let mut a = SimWorld::new(cfg.clone(), seed).unwrap();
        let mut b = SimWorld::new(cfg, seed).unwrap();
        a.advance(20_000.0);
        b.advance(20_000.0);
        prop_assert_eq!(a.trace(), b.trace());
    }

    #[test]
    fn larger_buffers_never_drop_more_or_wait_less(seed in any::<u64>(), small in 10usize..100, extra in 1usize..100) {
        let mut lo = SimWorld::new(bursty_world(small, 0.0, None), seed).unwrap();
        let mut hi = SimWorld::new(bursty_world(small + extra, 0.0, None), seed).unwrap();
        lo.advance(30_000.0);
        hi.advance(30_000.0);
        prop_assert!(hi.total_queue_drops() <= lo.total_queue_drops());
        prop_assert!(hi.mean_queue_wait_ms() >= lo.mean_queue_wait_ms());
    }

    #[test]
    fn window_means_replay_the_samples(samples in proptest::collection::vec((0.0f64..500.0, 0.0f64..1.0), 1..40)) {
        let w = samples.iter().fold(WindowStats::new(5.0), |w, (d, l)| update_window(w, *d, *l));
        let n = samples.len() as f64;
        let d = samples.iter().map(|s| s.0).sum::<f64>() / n;
        let l = samples.iter().map(|s| s.1).sum::<f64>() / n;
        prop_assert_eq!(w.samples, samples.len() as u64);
        prop_assert!((w.avg_delay_ms - d).abs() <= 1e-9 * d.max(1.0));
        prop_assert!((w.avg_loss - l).abs() <= 1e-9);
    }

    #[test]
    fn mos_is_monotone(d in 0.0f64..600.0, l in 0.0f64..1.0, dd in 0.0f64..100.0, dl in 0.0f64..0.2) {
        let m = estimate_mos(d, l).unwrap();
        prop_assert!(estimate_mos(d + dd, l).unwrap() <= m);
        prop_assert!(estimate_mos(d, (l + dl).min(1.0)).unwrap() <= m);
        prop_assert!((1.0..=4.5).contains(&m));
    }

    #[test]
    fn global_check_is_a_weighted_mean(calls in proptest::collection::vec((0.0f64..300.0, 0.0f64..0.3, 0.1f64..3.0), 1..5)) {
        let samples: Vec<(HeuristicSample, f64)> = calls
            .iter()
            .map(|(d, l, w)| (HeuristicSample::from_measurement(*d, *l).unwrap(), *w))
            .collect();
        let g = check_global(&samples, &Constraints::default()).unwrap();
        let wsum: f64 = calls.iter().map(|c| c.2).sum();
        let d = calls.iter().map(|c| c.0 * c.2).sum::<f64>() / wsum;
        let l = calls.iter().map(|c| c.1 * c.2).sum::<f64>() / wsum;
        prop_assert!((g.delay_ms - d).abs() < 1e-9 * d.max(1.0));
        prop_assert!((g.loss - l).abs() < 1e-12);
        prop_assert_eq!(g.ok, Constraints::default().satisfied_by(&HeuristicSample::with_mos(g.delay_ms, g.loss, g.mos).unwrap()));
    }

    #[test]
    fn refinement_keeps_ranks_dense(steps in proptest::collection::vec((0usize..4, 0usize..3, 0usize..3), 1..12)) {
        let actions = vec![ActionId::increase_buffer(), ActionId::red(), ActionId::fec(), ActionId::ControlledLoad];
        let mut kb = KnowledgeBase::seeded(vec![(ScenarioCase::Case2, actions.clone())], |_, _| HEstimate::new(100.0, 0.02)).unwrap();
        for (pick, d, l) in steps {
            let alive: Vec<ActionKind> = kb.entries(ScenarioCase::Case2).iter().map(|e| e.kind()).collect();
            let kind = alive[pick % alive.len()];
            let h = HEstimate::new(common::H_GRID[d].0, common::H_GRID[l].1);
            kb.acquire(ScenarioCase::Case2, kind, h).unwrap();
            kb.refine(ScenarioCase::Case2, kind).unwrap();
            kb.validate().unwrap();
            let ranks: Vec<u32> = kb.entries(ScenarioCase::Case2).iter().map(|e| e.rank).collect();
            prop_assert_eq!(ranks.clone(), (1..=ranks.len() as u32).collect::<Vec<_>>());
            let total = kb.entries(ScenarioCase::Case2).len() + kb.tombstones(ScenarioCase::Case2).len();
            prop_assert_eq!(total, actions.len());
            // The action just credited is never ranked below a worse estimate.
            let mine = kb.entry(ScenarioCase::Case2, kind).unwrap().clone();
            for e in kb.entries(ScenarioCase::Case2) {
                if e.rank < mine.rank {
                    prop_assert!(qosearch_core::knowledge::compare_h(&e.h_est, &mine.h_est) != std::cmp::Ordering::Greater);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn fec_reduces_residual_loss(seed in any::<u64>(), p in 0.01f64..0.49) {
        let mut plain = SimWorld::new(lossy_world(p, None), seed).unwrap();
        let mut fec = SimWorld::new(lossy_world(p, Some(FecConfig::default())), seed).unwrap();
        plain.advance(200_000.0);
        fec.advance(200_000.0);
        let lost = |w: &mut SimWorld| w.measure(FlowId(0)).unwrap().unwrap().loss;
        let (with, without) = (lost(&mut fec), lost(&mut plain));
        prop_assert!(with < without, "fec {} vs plain {}", with, without);
    }
}

#[test]
fn fec_residual_matches_block_enumeration() {
    // All 2^5 loss patterns of 4 media + 1 parity packets at p = 0.05.
    let p: f64 = 0.05;
    let mut expected = 0.0;
    for pattern in 0u32..32 {
        let lost = pattern.count_ones();
        let prob = p.powi(lost as i32) * (1.0 - p).powi(5 - lost as i32);
        let media_lost = (pattern & 0b1111).count_ones();
        if lost >= 2 {
            expected += prob * media_lost as f64 / 4.0;
        }
    }
    assert!((expected - 0.009_274).abs() < 1e-6, "{expected}");
    let mut w = SimWorld::new(lossy_world(p, Some(FecConfig::default())), 7).unwrap();
    w.advance(2_100_000.0);
    let c = w.counters(FlowId(0)).unwrap();
    assert!(c.sent >= 100_000);
    // Counters include parity packets; the window measure covers media only.
    let residual = w.measure(FlowId(0)).unwrap().unwrap().loss;
    assert!((residual - expected).abs() <= 0.2 * expected, "{residual} vs {expected}");
}
