//! Budget schedule and bidirectional rank allocation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapter::{Action, InitStrategy, RankChange, SvdAdapter};
use crate::error::{Error, Result};
use crate::importance::ImportanceReport;
use crate::rng::SeededRng;

/// Cubic-decay budget `b(t)` for the number of ranks moved per allocation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSchedule {
    pub b0: usize,
    pub t_warmup: usize,
    /// Length of the terminal freeze.
    pub t_final: usize,
    pub total_steps: usize,
    pub delta_t: usize,
}

impl BudgetSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.b0 == 0 {
            return Err(Error::config("schedule.b0", "must be positive"));
        }
        if self.delta_t == 0 {
            return Err(Error::config("schedule.delta_t", "must be positive"));
        }
        if self.t_warmup + self.t_final >= self.total_steps {
            return Err(Error::config(
                "schedule",
                format!(
                    "t_warmup + t_final ({} + {}) must be < total_steps ({})",
                    self.t_warmup, self.t_final, self.total_steps
                ),
            ));
        }
        Ok(())
    }

    /// End (exclusive) of the active window, `T - t_final`.
    pub fn window_end(&self) -> usize {
        self.total_steps.saturating_sub(self.t_final)
    }

    /// `round(b0 · (1 - (t - t_warmup) / (T - t_final))³)` inside the active
    /// window, 0 outside, clamped to `[0, b0]`. Rounding is half away from zero.
    pub fn budget(&self, t: usize) -> usize {
        if t < self.t_warmup || t >= self.window_end() {
            return 0;
        }
        let frac = (t - self.t_warmup) as f64 / self.window_end() as f64;
        if frac >= 1.0 {
            return 0;
        }
        let raw = (self.b0 as f64 * (1.0 - frac).powi(3)).round();
        raw.clamp(0.0, self.b0 as f64) as usize
    }

    pub fn is_allocation_step(&self, t: usize) -> bool {
        if self.delta_t == 0 {
            return false;
        }
        t >= self.t_warmup && t < self.window_end() && (t - self.t_warmup).is_multiple_of(self.delta_t)
    }

    pub fn allocation_steps(&self) -> impl Iterator<Item = usize> + '_ {
        (self.t_warmup..self.window_end()).step_by(self.delta_t.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocatorMode {
    #[default]
    Bidirectional,
    PruneOnly,
    ExpandOnly,
}

/// One prune or expand action as it appears in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationEvent {
    pub step: usize,
    pub adapter_id: String,
    pub action: Action,
    pub rank_before: usize,
    pub rank_after: usize,
    pub score: f64,
    /// Removed |λ| for prunes, init strategy name for expansions.
    pub detail: String,
    /// Direction index removed or appended.
    pub index: usize,
}

impl AllocationEvent {
    pub fn from_change(step: usize, score: f64, change: RankChange) -> Self {
        Self {
            step,
            adapter_id: change.adapter_id,
            action: change.action,
            rank_before: change.rank_before,
            rank_after: change.rank_after,
            score,
            detail: change.detail,
            index: change.index,
        }
    }
}

/// Rank snapshot of one adapter, as seen by the selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankStatus {
    pub id: String,
    pub rank: usize,
    pub r_max: usize,
}

impl From<&SvdAdapter> for RankStatus {
    fn from(a: &SvdAdapter) -> Self {
        Self {
            id: a.id().to_string(),
            rank: a.rank(),
            r_max: a.r_max(),
        }
    }
}

/// Targets chosen for one allocation step, plus the ranks they were chosen against.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    pub prune: Vec<String>,
    pub expand: Vec<String>,
    snapshot: BTreeMap<String, usize>,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.prune.is_empty() && self.expand.is_empty()
    }

    /// Splits into a prune-only and an expand-only selection against the
    /// same snapshot, for callers that act between the two phases.
    pub fn split(&self) -> (Selection, Selection) {
        let prune = Selection {
            prune: self.prune.clone(),
            expand: Vec::new(),
            snapshot: self.snapshot.clone(),
        };
        let expand = Selection {
            prune: Vec::new(),
            expand: self.expand.clone(),
            snapshot: self.snapshot.clone(),
        };
        (prune, expand)
    }
}

/// Picks prune and expand targets from an importance report.
///
/// Prune candidates are the lowest-scoring adapters with rank > 1, expand
/// candidates the highest-scoring ones below `r_max`. Ties break by adapter id.
/// In bidirectional mode targets are taken in pairs (one expand, then one
/// prune from the remaining adapters) until either side runs out or `b` pairs
/// are chosen, so the total rank is conserved and no adapter is on both
/// lists.
pub fn select_candidates(report: &ImportanceReport, adapters: &[RankStatus], b: usize, mode: AllocatorMode) -> Selection {
    let score = |id: &str| report.score(id).unwrap_or(0.0);
    let mut ascending: Vec<&RankStatus> = adapters.iter().collect();
    ascending.sort_by(|x, y| score(&x.id).total_cmp(&score(&y.id)).then_with(|| x.id.cmp(&y.id)));
    let mut descending: Vec<&RankStatus> = adapters.iter().collect();
    descending.sort_by(|x, y| score(&y.id).total_cmp(&score(&x.id)).then_with(|| x.id.cmp(&y.id)));

    let prunable = ascending.iter().filter(|a| a.rank > 1).map(|a| a.id.clone());
    let expandable = descending.iter().filter(|a| a.rank < a.r_max).map(|a| a.id.clone());

    let (prune, expand) = match mode {
        AllocatorMode::PruneOnly => (prunable.take(b).collect(), Vec::new()),
        AllocatorMode::ExpandOnly => (Vec::new(), expandable.take(b).collect()),
        AllocatorMode::Bidirectional => {
            let mut used = BTreeSet::new();
            let mut prune = Vec::new();
            let mut expand = Vec::new();
            let mut prunable = prunable.peekable();
            let mut expandable = expandable.peekable();
            while expand.len() < b {
                let Some(e) = expandable.find(|id| !used.contains(id)) else {
                    break;
                };
                let Some(p) = prunable.find(|id| !used.contains(id) && *id != e) else {
                    break;
                };
                used.insert(e.clone());
                used.insert(p.clone());
                expand.push(e);
                prune.push(p);
            }
            (prune, expand)
        }
    };
    Selection {
        prune,
        expand,
        snapshot: adapters.iter().map(|a| (a.id.clone(), a.rank)).collect(),
    }
}

/// Applies a selection: prunes first, then expansions, each in id order.
///
/// Fails with a staleness error if any targeted adapter's rank differs from
/// the snapshot the selection was made against. `on_change` sees every
/// structural change as it happens, so callers can keep per-direction state
/// (optimizer moments) in sync.
pub fn apply_allocation(
    step: usize,
    adapters: &mut [&mut SvdAdapter],
    selection: &Selection,
    report: &ImportanceReport,
    strategy: InitStrategy,
    rng: &mut SeededRng,
    mut on_change: impl FnMut(&RankChange),
) -> Result<Vec<AllocationEvent>> {
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, a) in adapters.iter().enumerate() {
        index.insert(a.id().to_string(), i);
    }
    for id in selection.prune.iter().chain(&selection.expand) {
        let Some(&i) = index.get(id) else {
            return Err(Error::Stale(format!("selected adapter {id} is not registered")));
        };
        let expected = selection.snapshot.get(id).copied();
        if expected != Some(adapters[i].rank()) {
            return Err(Error::Stale(format!(
                "adapter {id} has rank {} but was selected at rank {:?}",
                adapters[i].rank(),
                expected
            )));
        }
    }

    let mut prune: Vec<&String> = selection.prune.iter().collect();
    prune.sort();
    let mut expand: Vec<&String> = selection.expand.iter().collect();
    expand.sort();

    let mut events = Vec::with_capacity(prune.len() + expand.len());
    for id in prune {
        let change = adapters[index[id]].prune_rank()?;
        on_change(&change);
        events.push(AllocationEvent::from_change(step, report.score(id).unwrap_or(0.0), change));
    }
    for id in expand {
        let change = adapters[index[id]].expand_rank(strategy, rng)?;
        on_change(&change);
        events.push(AllocationEvent::from_change(step, report.score(id).unwrap_or(0.0), change));
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::MetricKind;
    use crate::matrix::Matrix;

    fn report(scores: &[(&str, f64)]) -> ImportanceReport {
        ImportanceReport {
            step: 0,
            metric: MetricKind::default(),
            scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            flags: BTreeMap::new(),
        }
    }

    fn status(id: &str, rank: usize, r_max: usize) -> RankStatus {
        RankStatus {
            id: id.into(),
            rank,
            r_max,
        }
    }

    const PAPER: BudgetSchedule = BudgetSchedule {
        b0: 4,
        t_warmup: 1000,
        t_final: 1000,
        total_steps: 10_000,
        delta_t: 200,
    };

    #[test]
    fn budget_hand_cases() {
        assert_eq!(PAPER.budget(1000), 4);
        assert_eq!(PAPER.budget(999), 0);
        assert_eq!(PAPER.budget(9000), 0);
        // fraction 0.5 → 4 · 0.125 = 0.5 → rounds away from zero to 1
        let half = BudgetSchedule {
            b0: 4,
            t_warmup: 0,
            t_final: 10,
            total_steps: 30,
            delta_t: 1,
        };
        assert_eq!(half.budget(10), 1);
        assert_eq!(half.budget(20), 0);
    }

    #[test]
    fn allocation_steps() {
        assert!(!PAPER.is_allocation_step(999));
        assert!(PAPER.is_allocation_step(1000));
        assert!(PAPER.is_allocation_step(1600));
        assert!(!PAPER.is_allocation_step(1700));
        assert!(!PAPER.is_allocation_step(9000));
        assert_eq!(PAPER.allocation_steps().count(), 40);
    }

    #[test]
    fn schedule_validation() {
        assert!(PAPER.validate().is_ok());
        let bad = BudgetSchedule {
            t_final: 9000,
            ..PAPER
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn extremes_rule() {
        let r = report(&[("A", 0.9), ("B", 0.5), ("C", 0.1)]);
        let ads = [status("A", 4, 8), status("B", 4, 8), status("C", 4, 8)];
        let sel = select_candidates(&r, &ads, 1, AllocatorMode::Bidirectional);
        assert_eq!(sel.prune, vec!["C"]);
        assert_eq!(sel.expand, vec!["A"]);
    }

    #[test]
    fn rank_one_is_skipped() {
        let r = report(&[("A", 0.9), ("B", 0.5), ("C", 0.1)]);
        let ads = [status("A", 4, 8), status("B", 4, 8), status("C", 1, 8)];
        let sel = select_candidates(&r, &ads, 1, AllocatorMode::Bidirectional);
        assert_eq!(sel.prune, vec!["B"]);
    }

    #[test]
    fn saturated_adapters_block_conservation() {
        let r = report(&[("A", 0.9), ("B", 0.5), ("C", 0.1)]);
        let ads = [status("A", 8, 8), status("B", 8, 8), status("C", 8, 8)];
        let sel = select_candidates(&r, &ads, 2, AllocatorMode::Bidirectional);
        assert!(sel.is_empty());
        let prune_only = select_candidates(&r, &ads, 2, AllocatorMode::PruneOnly);
        assert_eq!(prune_only.prune, vec!["C", "B"]);
        assert!(prune_only.expand.is_empty());
    }

    #[test]
    fn large_budget_keeps_lists_disjoint() {
        let r = report(&[("A", 0.9), ("B", 0.5), ("C", 0.1)]);
        let ads = [status("A", 4, 8), status("B", 4, 8), status("C", 4, 8)];
        let sel = select_candidates(&r, &ads, 5, AllocatorMode::Bidirectional);
        assert_eq!(sel.expand, vec!["A"]);
        assert_eq!(sel.prune, vec!["C"]);
        let ex = select_candidates(&r, &ads, 5, AllocatorMode::ExpandOnly);
        assert_eq!(ex.expand, vec!["A", "B", "C"]);
        assert!(ex.prune.is_empty());
    }

    #[test]
    fn ties_break_by_id() {
        let r = report(&[("b", 0.5), ("a", 0.5), ("c", 0.5), ("d", 0.5)]);
        let ads = [status("a", 2, 4), status("b", 2, 4), status("c", 2, 4), status("d", 2, 4)];
        let sel = select_candidates(&r, &ads, 1, AllocatorMode::Bidirectional);
        assert_eq!(sel.expand, vec!["a"]);
        assert_eq!(sel.prune, vec!["b"]);
    }

    fn adapter(id: &str, r: usize, seed: u64) -> SvdAdapter {
        let mut rng = SeededRng::new(seed);
        let base = Matrix::gaussian(6, 5, 1.0, &mut rng).unwrap();
        let mut a = SvdAdapter::new(id, base, r, 2 * r, 16.0, 0.02, &mut rng).unwrap();
        let lam: Vec<f64> = (0..r).map(|_| rng.normal(1.0)).collect();
        a.factors_mut().1.copy_from_slice(&lam);
        a
    }

    #[test]
    fn apply_empty_and_paired() {
        let mut rng = SeededRng::new(0);
        let mut a = adapter("a", 3, 1);
        let mut b = adapter("b", 3, 2);
        let mut c = adapter("c", 3, 3);
        let mut d = adapter("d", 3, 4);
        let r = report(&[("a", 0.9), ("b", 0.8), ("c", 0.2), ("d", 0.1)]);

        let mut all = [&mut a, &mut b, &mut c, &mut d];
        let statuses: Vec<RankStatus> = all.iter().map(|x| RankStatus::from(&**x)).collect();
        let empty = select_candidates(&r, &statuses, 0, AllocatorMode::Bidirectional);
        let ev = apply_allocation(5, &mut all, &empty, &r, InitStrategy::ZeroImpact, &mut rng, |_| {}).unwrap();
        assert!(ev.is_empty());

        let sel = select_candidates(&r, &statuses, 2, AllocatorMode::Bidirectional);
        let total_before: usize = all.iter().map(|x| x.rank()).sum();
        let mut seen = 0;
        let ev = apply_allocation(5, &mut all, &sel, &r, InitStrategy::ZeroImpact, &mut rng, |_| seen += 1).unwrap();
        assert_eq!(ev.len(), 4);
        assert_eq!(seen, 4);
        assert_eq!(all.iter().map(|x| x.rank()).sum::<usize>(), total_before);
        let order: Vec<(&str, Action)> = ev.iter().map(|e| (e.adapter_id.as_str(), e.action)).collect();
        assert_eq!(
            order,
            vec![
                ("c", Action::Prune),
                ("d", Action::Prune),
                ("a", Action::Expand),
                ("b", Action::Expand)
            ]
        );
        assert!(ev.iter().all(|e| e.step == 5));
        assert_eq!(ev[0].score, 0.2);

        // applying the same selection again is stale
        let again = apply_allocation(5, &mut all, &sel, &r, InitStrategy::ZeroImpact, &mut rng, |_| {});
        assert!(matches!(again, Err(Error::Stale(_))));
    }

    #[test]
    fn zero_impact_expansions_leave_probe_outputs_unchanged() {
        let mut rng = SeededRng::new(9);
        let mut a = adapter("a", 3, 11);
        let mut b = adapter("b", 3, 12);
        let probe = Matrix::gaussian(5, 8, 1.0, &mut rng).unwrap();
        let before_a = a.forward(&probe).unwrap();
        let r = report(&[("a", 0.9), ("b", 0.1)]);
        let statuses = [RankStatus::from(&a), RankStatus::from(&b)];
        let sel = select_candidates(&r, &statuses, 1, AllocatorMode::ExpandOnly);
        let mut all = [&mut a, &mut b];
        apply_allocation(0, &mut all, &sel, &r, InitStrategy::ZeroImpact, &mut rng, |_| {}).unwrap();
        assert_eq!(a.rank(), 4);
        let after_a = a.forward(&probe).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before_a), bits(&after_a));
    }

    #[test]
    fn fuzzed_modes_respect_bounds_and_direction() {
        let mut rng = SeededRng::new(123);
        for mode in [AllocatorMode::Bidirectional, AllocatorMode::PruneOnly, AllocatorMode::ExpandOnly] {
            let mut ads: Vec<RankStatus> = (0..5)
                .map(|i| {
                    let r_max = 2 + rng.below(8);
                    status(&format!("m{i}"), 1 + rng.below(r_max), r_max)
                })
                .collect();
            for _ in 0..500 {
                let r = ImportanceReport {
                    step: 0,
                    metric: MetricKind::default(),
                    scores: ads.iter().map(|a| (a.id.clone(), rng.uniform())).collect(),
                    flags: BTreeMap::new(),
                };
                let b = rng.below(6);
                let before: usize = ads.iter().map(|a| a.rank).sum();
                let sel = select_candidates(&r, &ads, b, mode);
                assert!(sel.prune.len() <= b && sel.expand.len() <= b);
                for id in &sel.prune {
                    assert!(!sel.expand.contains(id));
                    ads.iter_mut().find(|a| &a.id == id).unwrap().rank -= 1;
                }
                for id in &sel.expand {
                    ads.iter_mut().find(|a| &a.id == id).unwrap().rank += 1;
                }
                let after: usize = ads.iter().map(|a| a.rank).sum();
                match mode {
                    AllocatorMode::Bidirectional => assert_eq!(before, after),
                    AllocatorMode::PruneOnly => assert!(after <= before),
                    AllocatorMode::ExpandOnly => assert!(after >= before),
                }
                assert!(ads.iter().all(|a| a.rank >= 1 && a.rank <= a.r_max));
            }
        }
    }
}
