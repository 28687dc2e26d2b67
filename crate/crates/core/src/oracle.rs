//! Brute-force reference planner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{comp_mem_bal_split, Cut, SplitSpec};
use crate::error::{Error, Result};
use crate::graph::{check_theorem_conditions, ComputationGraph, TheoremConditionReport};
use crate::partitioner::{evaluate_stage, fixed_plan, PartitionPlan, PlanConfig};

pub const ENUMERATION_LIMIT: u128 = 10_000_000;

/// `C(n, k)` without overflow for the sizes that matter here.
pub fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n.saturating_sub(k));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    acc
}

/// Per-stage costs for every node range each stage could occupy.
struct CostTable {
    n: usize,
    /// cost[x][start][end - start - 1]
    cost: Vec<Vec<Vec<Option<u64>>>>,
}

impl CostTable {
    /// Ranges whose compute time alone exceeds `bound` are left out; no
    /// tuple using them can reach a bottleneck of `bound` or less.
    fn build(g: &ComputationGraph, cfg: &PlanConfig, bound: u64) -> Self {
        let n = g.len();
        let l = cfg.stages;
        let cost = (0..l)
            .map(|x| {
                // stage x+1 starts at >= x and ends at <= n - (l - x - 1)
                (0..n)
                    .into_par_iter()
                    .map(|s| {
                        if s < x || s + (l - x) > n {
                            return vec![];
                        }
                        (s + 1..=n - (l - x - 1))
                            .map(|e| {
                                if g.time(s..e) > bound {
                                    return None;
                                }
                                evaluate_stage(g, s..e, x + 1, cfg).map(|v| v.cost())
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        CostTable { n, cost }
    }

    fn get(&self, x: usize, s: usize, e: usize) -> Option<u64> {
        self.cost[x][s][e - s - 1]
    }

    fn bottleneck(&self, cuts: &[usize]) -> Option<u64> {
        let mut worst = 0;
        let mut s = 0;
        for (x, &p) in cuts.iter().chain(std::iter::once(&(self.n - 1))).enumerate() {
            worst = worst.max(self.get(x, s, p + 1)?);
            s = p + 1;
        }
        Some(worst)
    }
}

fn for_each_tuple(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k == 0 {
        f(&[]);
        return;
    }
    if n < k + 1 {
        return;
    }
    let mut t: Vec<usize> = (0..k).collect();
    loop {
        f(&t);
        // positions range over 0..=n-2
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if t[i] < n - 2 - (k - 1 - i) {
                break;
            }
            if i == 0 {
                return;
            }
        }
        t[i] += 1;
        for j in i + 1..k {
            t[j] = t[j - 1] + 1;
        }
    }
}

/// A bottleneck some tuple is known to reach: the planner's cuts, scored
/// here stage by stage. It only narrows which ranges get evaluated.
fn upper_bound(g: &ComputationGraph, cfg: &PlanConfig) -> u64 {
    let Ok(p) = crate::partitioner::plan(g, cfg) else {
        return u64::MAX;
    };
    let mut worst = 0;
    for (x, r) in Cut::new(p.cuts).stage_ranges(g.len()).enumerate() {
        match evaluate_stage(g, r, x + 1, cfg) {
            Some(v) => worst = worst.max(v.cost()),
            None => return u64::MAX,
        }
    }
    worst
}

/// Every optimal cut tuple, in lexicographic order, with the optimum.
pub fn all_optimal_cuts(g: &ComputationGraph, cfg: &PlanConfig) -> Result<(u64, Vec<Vec<usize>>)> {
    let n = g.len();
    let l = cfg.stages;
    if l == 0 || l > n {
        return Err(Error::Degenerate(format!("{l} stages over {n} nodes")));
    }
    let combos = binomial(n as u64 - 1, l as u64 - 1);
    if combos > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            combinations: combos,
            limit: ENUMERATION_LIMIT,
        });
    }
    let table = CostTable::build(g, cfg, upper_bound(g, cfg));
    let mut best: Option<(u64, Vec<Vec<usize>>)> = None;
    for_each_tuple(n, l - 1, |t| {
        let Some(b) = table.bottleneck(t) else { return };
        match &mut best {
            Some((bb, list)) if b == *bb => list.push(t.to_vec()),
            Some((bb, _)) if b > *bb => {}
            _ => best = Some((b, vec![t.to_vec()])),
        }
    });
    best.ok_or_else(|| {
        // report the same way the planner does
        match crate::partitioner::plan(g, cfg) {
            Err(e) => e,
            Ok(_) => Error::Degenerate("no feasible cut tuple".into()),
        }
    })
}

/// Exhaustive search; ties go to the lexicographically smallest tuple.
pub fn exhaustive_plan(g: &ComputationGraph, cfg: &PlanConfig) -> Result<PartitionPlan> {
    let (_, cuts) = all_optimal_cuts(g, cfg)?;
    fixed_plan(g, cfg, &Cut::new(cuts[0].clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremVerification {
    pub rho_cb: usize,
    pub rho_mb: usize,
    pub interval: (usize, usize),
    /// Smallest optimal position.
    pub optimal_cut: usize,
    /// All positions reaching the optimum.
    pub optimal_cuts: Vec<usize>,
    pub optimal_bottleneck_us: u64,
    /// Some optimal position lies in the interval.
    pub inside: bool,
    pub conditions: TheoremConditionReport,
    /// Containment is only claimed when every condition holds.
    pub claim_applies: bool,
}

impl TheoremVerification {
    /// Fails only when the conditions hold and no optimum is inside.
    pub fn passed(&self) -> bool {
        self.inside || !self.claim_applies
    }
}

/// Two-stage check that an optimal cut lies between the compute-balanced
/// and memory-balanced positions. `cfg.stages` is forced to 2.
pub fn verify_theorem(g: &ComputationGraph, cfg: &PlanConfig) -> Result<TheoremVerification> {
    let mut cfg = cfg.clone();
    cfg.stages = 2;
    if cfg.micro_batches == 0 {
        cfg.micro_batches = 2;
    }
    let (cb, mb) = comp_mem_bal_split(
        g,
        0..g.len(),
        SplitSpec {
            first_stage: 1,
            left_span: 1,
            right_span: 1,
            total_stages: 2,
            schedule: cfg.schedule,
        },
    )?;
    let (lo, hi) = (cb.min(mb), cb.max(mb));
    let (best, cuts) = all_optimal_cuts(g, &cfg)?;
    let optimal_cuts: Vec<usize> = cuts.into_iter().map(|t| t[0]).collect();
    let conditions = check_theorem_conditions(g, 2, cfg.bandwidth_bps)?;
    Ok(TheoremVerification {
        rho_cb: cb,
        rho_mb: mb,
        interval: (lo, hi),
        optimal_cut: optimal_cuts[0],
        inside: optimal_cuts.iter().any(|p| (lo..=hi).contains(p)),
        optimal_cuts,
        optimal_bottleneck_us: best,
        claim_applies: conditions.all(),
        conditions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::Schedule;
    use crate::graph::fixtures::{tri4, uni8};
    use crate::units::{GIB, MIB};

    fn cfg(stages: usize, schedule: Schedule, cap: u64) -> PlanConfig {
        PlanConfig::new(stages, schedule, cap, 16 * GIB)
    }

    #[test]
    fn tuple_enumeration_counts() {
        for (n, k) in [(8, 1), (8, 3), (10, 4), (5, 4), (3, 0)] {
            let mut seen = Vec::new();
            for_each_tuple(n, k, |t| seen.push(t.to_vec()));
            assert_eq!(seen.len() as u128, binomial(n as u64 - 1, k as u64));
            assert!(seen.windows(2).all(|w| w[0] < w[1]));
            assert!(seen.iter().all(|t| t.iter().all(|&p| p + 1 < n)));
        }
        assert_eq!(binomial(23, 3), 1771);
    }

    #[test]
    fn uni8_two_stages() {
        let p = exhaustive_plan(&uni8(), &cfg(2, Schedule::Async1F1B, GIB)).unwrap();
        assert_eq!(p.cuts, vec![3]);
        assert_eq!(p.bottleneck_us, 4000);
    }

    #[test]
    fn tri4_two_stages() {
        let p = exhaustive_plan(&tri4(), &cfg(2, Schedule::Async1F1B, GIB)).unwrap();
        assert_eq!(p.cuts, vec![2]);
        assert_eq!(p.bottleneck_us, 6000);
    }

    #[test]
    fn uni8_tight() {
        let p = exhaustive_plan(&uni8(), &cfg(2, Schedule::Async1F1B, 7 * MIB)).unwrap();
        assert_eq!(p.cuts, vec![2]);
        assert_eq!(p.bottleneck_us, 5000);
    }

    #[test]
    fn too_large_guard() {
        let g = crate::synthgen::gen_uniform(200, 100, 1).unwrap();
        assert!(matches!(
            exhaustive_plan(&g, &cfg(8, Schedule::Sync, GIB)),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn theorem_tri4() {
        let v = verify_theorem(&tri4(), &cfg(2, Schedule::Async1F1B, GIB)).unwrap();
        assert_eq!(v.interval, (0, 2));
        assert_eq!(v.optimal_cut, 2);
        assert!(v.inside);
    }

    #[test]
    fn theorem_uni8_sync() {
        let v = verify_theorem(&uni8(), &cfg(2, Schedule::Sync, GIB)).unwrap();
        assert_eq!(v.interval, (3, 3));
        assert_eq!(v.optimal_cut, 3);
        assert!(v.inside);
        assert!(v.passed());
    }
}
