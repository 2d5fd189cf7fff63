//! Ranked per-case action lists with selection, acquisition and refinement.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{conflicts_in, default_conflicts, ActionId, ActionKind, ConflictSet};
use crate::metrics::{classify, Constraints, HeuristicSample, QualityCategory};

pub const KB_SCHEMA_VERSION: u32 = 1;

static DEFAULT_KB_JSON: &str = include_str!("../data/default_kb.json");

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("{case} has no action {action}")]
    UnknownAction { case: ScenarioCase, action: ActionKind },
    #[error("{case} already lists {action}")]
    DuplicateAction { case: ScenarioCase, action: ActionKind },
    #[error("ranks of {0} are not 1..n")]
    BadRanks(ScenarioCase),
    #[error("unsupported knowledge base version {0}")]
    Version(u32),
    #[error("invalid estimate: {0}")]
    InvalidEstimate(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which of the two metrics violate their thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioCase {
    /// Delay and loss within limits.
    Case1,
    /// Delay fine, loss high.
    Case2,
    /// Loss fine, delay high.
    Case3,
    /// Both violated.
    Case4,
}

impl ScenarioCase {
    pub const ALL: [ScenarioCase; 4] = [
        ScenarioCase::Case1,
        ScenarioCase::Case2,
        ScenarioCase::Case3,
        ScenarioCase::Case4,
    ];

    pub fn from_flags(delay_ok: bool, loss_ok: bool) -> Self {
        match (delay_ok, loss_ok) {
            (true, true) => ScenarioCase::Case1,
            (true, false) => ScenarioCase::Case2,
            (false, true) => ScenarioCase::Case3,
            (false, false) => ScenarioCase::Case4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioCase::Case1 => "case1",
            ScenarioCase::Case2 => "case2",
            ScenarioCase::Case3 => "case3",
            ScenarioCase::Case4 => "case4",
        }
    }
}

impl fmt::Display for ScenarioCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Classifies a (delay, loss) pair against the thresholds.
pub fn detect_case(delay_ms: f64, loss: f64, constraints: &Constraints) -> ScenarioCase {
    ScenarioCase::from_flags(constraints.delay_ok(delay_ms), constraints.loss_ok(loss))
}

/// Estimated or measured outcome of an action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HEstimate {
    pub delay_ms: f64,
    pub loss: f64,
}

impl HEstimate {
    pub fn new(delay_ms: f64, loss: f64) -> Self {
        Self { delay_ms, loss }
    }

    fn sample(&self) -> Option<HeuristicSample> {
        HeuristicSample::from_measurement(self.delay_ms, self.loss).ok()
    }

    pub fn category(&self) -> QualityCategory {
        self.sample().map_or(QualityCategory::Poor, |s| classify(&s))
    }

    pub fn penalty(&self) -> f64 {
        penalty(self.delay_ms, self.loss)
    }

    fn validate(&self) -> Result<(), KnowledgeError> {
        self.sample()
            .map(|_| ())
            .ok_or_else(|| KnowledgeError::InvalidEstimate(format!("({}, {})", self.delay_ms, self.loss)))
    }
}

/// Scalar badness: each term is 1.0 at its threshold.
pub fn penalty(delay_ms: f64, loss: f64) -> f64 {
    delay_ms / 180.0 + loss / 0.05
}

/// Orders estimates best first: category, then penalty.
pub fn compare_h(a: &HEstimate, b: &HEstimate) -> Ordering {
    b.category()
        .cmp(&a.category())
        .then_with(|| a.penalty().total_cmp(&b.penalty()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEntry {
    pub rank: u32,
    #[serde(flatten)]
    pub action: ActionId,
    pub h_est: HEstimate,
}

impl ActionEntry {
    pub fn kind(&self) -> ActionKind {
        self.action.kind()
    }
}

/// A deleted entry, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tombstone {
    #[serde(flatten)]
    pub action: ActionId,
    pub h_est: HEstimate,
    pub rank_before: u32,
    pub replaced_by: ActionKind,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CaseList {
    pub entries: Vec<ActionEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tombstones: Vec<Tombstone>,
}

/// Outcome of one refinement step, for logging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefineStep {
    Swapped { a: ActionKind, a_current: ActionKind },
    Replaced { deleted: ActionKind, a_current: ActionKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub version: u32,
    pub revision: u64,
    pub cases: BTreeMap<ScenarioCase, CaseList>,
    pub conflicts: Vec<ConflictSet>,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        Self {
            version: KB_SCHEMA_VERSION,
            revision: 0,
            cases: ScenarioCase::ALL.iter().map(|c| (*c, CaseList::default())).collect(),
            conflicts: default_conflicts(),
        }
    }
}

/// Ranked actions per case, best first.
pub fn standard_order() -> Vec<(ScenarioCase, Vec<ActionId>)> {
    vec![
        (ScenarioCase::Case1, vec![ActionId::GuaranteedLoad]),
        (
            ScenarioCase::Case2,
            vec![
                ActionId::increase_buffer(),
                ActionId::red(),
                ActionId::fec(),
                ActionId::ControlledLoad,
            ],
        ),
        (
            ScenarioCase::Case3,
            vec![ActionId::decrease_buffer(), ActionId::wred(), ActionId::ControlledLoad],
        ),
        (ScenarioCase::Case4, vec![ActionId::ControlledLoad, ActionId::red_narrow()]),
    ]
}

/// The knowledge base shipped with the crate (calibrated estimates).
pub fn default_knowledge() -> KnowledgeBase {
    KnowledgeBase::from_json(DEFAULT_KB_JSON).expect("bundled knowledge base is valid")
}

impl KnowledgeBase {
    /// Builds a KB from per-case ordered actions; `h` supplies each estimate.
    pub fn seeded(
        order: Vec<(ScenarioCase, Vec<ActionId>)>,
        mut h: impl FnMut(ScenarioCase, &ActionId) -> HEstimate,
    ) -> Result<Self, KnowledgeError> {
        let mut kb = KnowledgeBase::default();
        for (case, actions) in order {
            let list = kb.cases.entry(case).or_default();
            for (i, action) in actions.into_iter().enumerate() {
                if list.entries.iter().any(|e| e.kind() == action.kind()) {
                    return Err(KnowledgeError::DuplicateAction {
                        case,
                        action: action.kind(),
                    });
                }
                let h_est = h(case, &action);
                h_est.validate()?;
                list.entries.push(ActionEntry {
                    rank: i as u32 + 1,
                    action,
                    h_est,
                });
            }
        }
        Ok(kb)
    }

    pub fn from_json(s: &str) -> Result<Self, KnowledgeError> {
        let mut kb: KnowledgeBase = serde_json::from_str(s)?;
        if kb.version != KB_SCHEMA_VERSION {
            return Err(KnowledgeError::Version(kb.version));
        }
        for case in ScenarioCase::ALL {
            kb.cases.entry(case).or_default();
        }
        kb.validate()?;
        Ok(kb)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("knowledge base serializes")
    }

    pub fn validate(&self) -> Result<(), KnowledgeError> {
        for (case, list) in &self.cases {
            let mut ranks: Vec<u32> = list.entries.iter().map(|e| e.rank).collect();
            ranks.sort_unstable();
            if ranks.iter().enumerate().any(|(i, r)| *r != i as u32 + 1) {
                return Err(KnowledgeError::BadRanks(*case));
            }
            for (i, e) in list.entries.iter().enumerate() {
                e.h_est.validate()?;
                if list.entries[..i].iter().any(|o| o.kind() == e.kind()) {
                    return Err(KnowledgeError::DuplicateAction {
                        case: *case,
                        action: e.kind(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn conflicts(&self, a: ActionKind, b: ActionKind) -> bool {
        conflicts_in(&self.conflicts, a, b)
    }

    /// Live entries of a case, best rank first.
    pub fn entries(&self, case: ScenarioCase) -> Vec<&ActionEntry> {
        let mut v: Vec<&ActionEntry> = self.cases.get(&case).map(|l| l.entries.iter().collect()).unwrap_or_default();
        v.sort_by_key(|e| e.rank);
        v
    }

    pub fn tombstones(&self, case: ScenarioCase) -> &[Tombstone] {
        self.cases.get(&case).map_or(&[], |l| l.tombstones.as_slice())
    }

    pub fn entry(&self, case: ScenarioCase, kind: ActionKind) -> Option<&ActionEntry> {
        self.cases.get(&case)?.entries.iter().find(|e| e.kind() == kind)
    }

    pub fn rank_of(&self, case: ScenarioCase, kind: ActionKind) -> Option<u32> {
        self.entry(case, kind).map(|e| e.rank)
    }

    /// Selection key: category of h, penalty, rank, name.
    fn key_cmp(a: &ActionEntry, b: &ActionEntry) -> Ordering {
        compare_h(&a.h_est, &b.h_est)
            .then_with(|| a.rank.cmp(&b.rank))
            .then_with(|| a.action.name().cmp(b.action.name()))
    }

    /// Entries of a case in selection order (argmin first).
    pub fn selection_order(&self, case: ScenarioCase) -> Vec<ActionEntry> {
        let mut v: Vec<ActionEntry> = self.entries(case).into_iter().cloned().collect();
        v.sort_by(Self::key_cmp);
        v
    }

    /// The entry with the best estimated outcome. `None` when the case is empty.
    pub fn select_one_of(&self, case: ScenarioCase) -> Option<&ActionEntry> {
        self.entries(case).into_iter().min_by(|a, b| Self::key_cmp(a, b))
    }

    /// Best entry whose kind is not in `tried`. `None` when exhausted.
    pub fn select_next(&self, case: ScenarioCase, tried: &[ActionKind]) -> Option<&ActionEntry> {
        self.entries(case)
            .into_iter()
            .filter(|e| !tried.contains(&e.kind()))
            .min_by(|a, b| Self::key_cmp(a, b))
    }

    /// Replaces an action's estimate with a measured outcome.
    pub fn acquire(&mut self, case: ScenarioCase, kind: ActionKind, measured: HEstimate) -> Result<(), KnowledgeError> {
        measured.validate()?;
        let entry = self
            .cases
            .get_mut(&case)
            .and_then(|l| l.entries.iter_mut().find(|e| e.kind() == kind))
            .ok_or(KnowledgeError::UnknownAction { case, action: kind })?;
        entry.h_est = measured;
        self.revision += 1;
        Ok(())
    }

    /// Re-ranks a case after `a_current` satisfied the constraints: every
    /// action ranked above it whose estimate is worse either trades places
    /// with it or, when the two conflict, is deleted and its rank taken.
    pub fn refine(&mut self, case: ScenarioCase, a_current: ActionKind) -> Result<Vec<RefineStep>, KnowledgeError> {
        let revision = self.revision + 1;
        let conflicts = self.conflicts.clone();
        let list = self.cases.get_mut(&case).ok_or(KnowledgeError::UnknownAction {
            case,
            action: a_current,
        })?;
        let cur = list
            .entries
            .iter()
            .position(|e| e.kind() == a_current)
            .ok_or(KnowledgeError::UnknownAction {
                case,
                action: a_current,
            })?;
        let mut order: Vec<usize> = (0..list.entries.len()).collect();
        order.sort_by_key(|i| list.entries[*i].rank);

        let mut deleted = vec![false; list.entries.len()];
        let mut steps = Vec::new();
        for i in order {
            if i == cur || deleted[i] {
                continue;
            }
            let (a, c) = (&list.entries[i], &list.entries[cur]);
            if a.rank >= c.rank || compare_h(&a.h_est, &c.h_est) != Ordering::Greater {
                continue;
            }
            let a_rank = a.rank;
            let a_kind = a.kind();
            if conflicts_in(&conflicts, a_kind, a_current) {
                list.entries[cur].rank = a_rank;
                deleted[i] = true;
                steps.push(RefineStep::Replaced {
                    deleted: a_kind,
                    a_current,
                });
            } else {
                let cur_rank = list.entries[cur].rank;
                list.entries[cur].rank = a_rank;
                list.entries[i].rank = cur_rank;
                steps.push(RefineStep::Swapped { a: a_kind, a_current });
            }
        }
        if steps.is_empty() {
            return Ok(steps);
        }
        let mut kept = Vec::with_capacity(list.entries.len());
        for (i, e) in list.entries.drain(..).enumerate() {
            if deleted[i] {
                list.tombstones.push(Tombstone {
                    rank_before: e.rank,
                    action: e.action,
                    h_est: e.h_est,
                    replaced_by: a_current,
                    revision,
                });
            } else {
                kept.push(e);
            }
        }
        kept.sort_by_key(|e| e.rank);
        for (i, e) in kept.iter_mut().enumerate() {
            e.rank = i as u32 + 1;
        }
        list.entries = kept;
        self.revision = revision;
        Ok(steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kb_with(case: ScenarioCase, entries: &[(ActionId, f64, f64)]) -> KnowledgeBase {
        let actions: Vec<ActionId> = entries.iter().map(|e| e.0.clone()).collect();
        KnowledgeBase::seeded(vec![(case, actions)], |_, a| {
            let e = entries.iter().find(|e| &e.0 == a).unwrap();
            HEstimate::new(e.1, e.2)
        })
        .unwrap()
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty(0.0, 0.0), 0.0);
        assert!((penalty(180.0, 0.05) - 2.0).abs() < 1e-12);
        assert!((penalty(90.0, 0.01) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn detect_case_examples() {
        let c = Constraints::default();
        assert_eq!(detect_case(100.0, 0.06, &c), ScenarioCase::Case2);
        assert_eq!(detect_case(200.0, 0.01, &c), ScenarioCase::Case3);
        assert_eq!(detect_case(250.0, 0.10, &c), ScenarioCase::Case4);
        assert_eq!(detect_case(180.0, 0.05, &c), ScenarioCase::Case1);
    }

    #[test]
    fn standard_order_ranks() {
        let kb = KnowledgeBase::seeded(standard_order(), |_, _| HEstimate::new(50.0, 0.0)).unwrap();
        assert_eq!(kb.entries(ScenarioCase::Case2)[0].kind(), ActionKind::IncreaseBuffer);
        assert_eq!(kb.entries(ScenarioCase::Case4)[0].kind(), ActionKind::ControlledLoad);
        kb.validate().unwrap();
    }

    #[test]
    fn acquire_replaces_estimate() {
        let mut kb = kb_with(ScenarioCase::Case2, &[(ActionId::red(), 150.0, 0.02)]);
        kb.acquire(ScenarioCase::Case2, ActionKind::EnableRed, HEstimate::new(60.0, 0.01))
            .unwrap();
        assert_eq!(kb.entries(ScenarioCase::Case2)[0].h_est, HEstimate::new(60.0, 0.01));
        assert_eq!(kb.revision, 1);
        assert!(kb
            .acquire(ScenarioCase::Case2, ActionKind::EnableFec, HEstimate::new(1.0, 0.0))
            .is_err());
    }

    #[test]
    fn refine_already_first_is_identity() {
        let mut kb = kb_with(
            ScenarioCase::Case2,
            &[(ActionId::red(), 10.0, 0.0), (ActionId::fec(), 170.0, 0.04)],
        );
        let before = kb.clone();
        assert!(kb.refine(ScenarioCase::Case2, ActionKind::EnableRed).unwrap().is_empty());
        assert_eq!(kb, before);
    }

    #[test]
    fn kb_json_round_trip() {
        let kb = KnowledgeBase::seeded(standard_order(), |_, _| HEstimate::new(50.0, 0.01)).unwrap();
        let back = KnowledgeBase::from_json(&kb.to_json()).unwrap();
        assert_eq!(back, kb);
    }
}
