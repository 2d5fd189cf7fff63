#![allow(dead_code)]

use std::collections::HashMap;

use qosearch_core::actions::{ActionId, ActionKind, ConflictSet};
use qosearch_core::harness::{preset, run, Mode, RunArtifacts, RunOptions, Scenario};
use qosearch_core::knowledge::{HEstimate, KnowledgeBase, ScenarioCase};
use qosearch_core::metrics::QualityCategory;

pub fn run_scenario(s: &Scenario, seed: u64, mode: Mode) -> RunArtifacts {
    run(s, RunOptions::new(seed, mode)).unwrap_or_else(|e| panic!("{} seed {seed}: {e}", s.name))
}

pub fn run_preset(name: &str, seed: u64, mode: Mode) -> RunArtifacts {
    run_scenario(&preset(name).expect("preset"), seed, mode)
}

/// Run-average (delay, loss) of one call straight from the packet trace.
pub fn call_averages(art: &RunArtifacts, call: usize) -> (f64, f64) {
    let c = &art.summary.calls[call];
    (c.avg_delay_ms.expect("delay"), c.avg_loss.expect("loss"))
}

/// Heuristic grid used by the exhaustive refine checks: one estimate per
/// quality band.
pub const H_GRID: [(f64, f64); 3] = [(40.0, 0.0), (150.0, 0.03), (260.0, 0.12)];

/// A small KB under test plus the plain-data view the oracle works on.
pub struct RefineCase {
    pub kb: KnowledgeBase,
    pub kinds: Vec<ActionKind>,
    pub h: Vec<(f64, f64)>,
    pub pairs: Vec<(usize, usize)>,
}

fn action_for(kind: ActionKind) -> ActionId {
    match kind {
        ActionKind::IncreaseBuffer => ActionId::increase_buffer(),
        ActionKind::DecreaseBuffer => ActionId::decrease_buffer(),
        ActionKind::EnableRed => ActionId::red(),
        ActionKind::EnableWred => ActionId::wred(),
        ActionKind::EnableFec => ActionId::fec(),
        ActionKind::ControlledLoad => ActionId::ControlledLoad,
        ActionKind::GuaranteedLoad => ActionId::GuaranteedLoad,
    }
}

/// Every KB of `n` actions over the heuristic grid and every conflict graph.
pub fn refine_cases(n: usize) -> Vec<RefineCase> {
    let kinds: Vec<ActionKind> = ActionKind::ALL[..n].to_vec();
    let all_pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut out = Vec::new();
    for hcode in 0..3usize.pow(n as u32) {
        let h: Vec<(f64, f64)> = (0..n).map(|i| H_GRID[(hcode / 3usize.pow(i as u32)) % 3]).collect();
        for mask in 0..(1u32 << all_pairs.len()) {
            let pairs: Vec<(usize, usize)> = all_pairs
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, p)| *p)
                .collect();
            let actions = kinds.iter().map(|k| action_for(*k)).collect();
            let mut kb = KnowledgeBase::seeded(vec![(ScenarioCase::Case2, actions)], |_, a| {
                let i = kinds.iter().position(|k| *k == a.kind()).unwrap();
                HEstimate::new(h[i].0, h[i].1)
            })
            .unwrap();
            kb.conflicts = pairs.iter().map(|(i, j)| ConflictSet::new([kinds[*i], kinds[*j]])).collect();
            out.push(RefineCase {
                kb,
                kinds: kinds.clone(),
                h: h.clone(),
                pairs,
            });
        }
    }
    out
}

fn band(d: f64, l: f64) -> u8 {
    // Higher is better; mirrors the ordering of the quality categories.
    match HEstimate::new(d, l).category() {
        QualityCategory::Excellent => 3,
        QualityCategory::Good => 2,
        QualityCategory::Average => 1,
        QualityCategory::Poor => 0,
    }
}

/// True when estimate `a` is strictly worse than `b`.
fn worse(a: (f64, f64), b: (f64, f64)) -> bool {
    let (ba, bb) = (band(a.0, a.1), band(b.0, b.1));
    if ba != bb {
        return ba < bb;
    }
    let p = |x: (f64, f64)| x.0 / 180.0 + x.1 / 0.05;
    p(a) > p(b)
}

/// Literal transcription of the refinement loop over plain maps.
/// Returns the resulting ranking (kinds, best first) and the deleted kinds.
pub fn refine_oracle(c: &RefineCase, current: usize) -> (Vec<ActionKind>, Vec<ActionKind>) {
    let n = c.kinds.len();
    let mut rank: HashMap<usize, u32> = (0..n).map(|i| (i, i as u32 + 1)).collect();
    let mut deleted: Vec<usize> = Vec::new();
    let conflict = |i: usize, j: usize| c.pairs.contains(&(i.min(j), i.max(j)));
    for a in 0..n {
        if a == current || deleted.contains(&a) {
            continue;
        }
        if rank[&a] < rank[&current] && worse(c.h[a], c.h[current]) {
            if conflict(a, current) {
                let r = rank[&a];
                rank.insert(current, r);
                rank.remove(&a);
                deleted.push(a);
            } else {
                let (ra, rc) = (rank[&a], rank[&current]);
                rank.insert(a, rc);
                rank.insert(current, ra);
            }
        }
    }
    let mut alive: Vec<usize> = rank.keys().copied().collect();
    alive.sort_by_key(|i| rank[i]);
    (
        alive.into_iter().map(|i| c.kinds[i]).collect(),
        deleted.into_iter().map(|i| c.kinds[i]).collect(),
    )
}
