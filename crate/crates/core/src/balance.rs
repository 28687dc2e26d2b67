//! Compute-balanced and memory-balanced partition positions.
//!
//! A cut position `p` means every node at canonical index `<= p` goes to the
//! left of the boundary. Compute balance is an exact min-max over positions;
//! memory balance is a first-crossing traversal of the allocation series
//! against per-stage targets.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ComputationGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schedule {
    /// GPipe-style: all forwards, barrier, all backwards.
    #[serde(rename = "sync")]
    Sync,
    /// PipeDream-style one-forward-one-backward.
    #[serde(rename = "async_1f1b")]
    Async1F1B,
}

impl Schedule {
    /// How many copies of a stage's per-micro-batch footprint are resident
    /// at once. `stage` is 1-based.
    pub fn replica_weight(self, stage: usize, stages: usize, micro_batches: usize) -> u64 {
        match self {
            Schedule::Async1F1B => (stages + 1 - stage) as u64,
            Schedule::Sync => micro_batches as u64,
        }
    }

    /// Relative share of memory a stage should receive so that scheduled
    /// peaks come out equal.
    fn memory_share(self, stage: usize, stages: usize) -> f64 {
        match self {
            Schedule::Async1F1B => 1.0 / (stages + 1 - stage) as f64,
            Schedule::Sync => 1.0,
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Sync => "sync",
            Schedule::Async1F1B => "async_1f1b",
        })
    }
}

/// Ordered boundary positions, one fewer than the number of parts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cut {
    pub positions: Vec<usize>,
}

impl Cut {
    pub fn new(positions: Vec<usize>) -> Self {
        Cut { positions }
    }

    pub fn parts(&self) -> usize {
        self.positions.len() + 1
    }

    /// Node ranges of each part for a graph of `n` nodes.
    pub fn stage_ranges(&self, n: usize) -> impl Iterator<Item = Range<usize>> + '_ {
        let starts = std::iter::once(0).chain(self.positions.iter().map(|p| p + 1));
        let ends = self.positions.iter().map(|p| p + 1).chain(std::iter::once(n));
        starts.zip(ends).map(|(s, e)| s..e)
    }

    /// Checks strict increase and that every part is nonempty.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut prev: Option<usize> = None;
        for &p in &self.positions {
            if p + 1 >= n || prev.is_some_and(|q| p <= q) {
                return Err(Error::Degenerate(format!(
                    "cut positions {:?} are not strictly increasing within 0..{}",
                    self.positions,
                    n.saturating_sub(1)
                )));
            }
            prev = Some(p);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMemProfile {
    /// 1-based stage index.
    pub stage: usize,
    pub micro_peak: u64,
    pub sched_peak: u64,
    pub time: u64,
}

pub fn stage_profile(
    g: &ComputationGraph,
    range: Range<usize>,
    stage: usize,
    stages: usize,
    schedule: Schedule,
    micro_batches: usize,
) -> StageMemProfile {
    let micro_peak = g.peak(range.clone());
    StageMemProfile {
        stage,
        micro_peak,
        sched_peak: schedule.replica_weight(stage, stages, micro_batches) * micro_peak,
        time: g.time(range),
    }
}

/// Exact min-max split of `range` into `weights.len()` contiguous parts,
/// minimizing `max(part_time / weight)`. Ties resolve to the
/// lexicographically smallest position tuple.
pub fn compute_balanced(
    g: &ComputationGraph,
    range: Range<usize>,
    weights: &[f64],
) -> Result<Cut> {
    let k = weights.len();
    let n = range.len();
    if k == 0 || n < k {
        return Err(Error::Degenerate(format!(
            "cannot split {n} nodes into {k} parts"
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::Degenerate("part weights must be positive".into()));
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0u64);
    for node in &g.nodes[range.clone()] {
        prefix.push(prefix.last().unwrap() + node.time());
    }
    let seg = |s: usize, e: usize, j: usize| (prefix[e + 1] - prefix[s]) as f64 / weights[j];

    // best[j][s]: optimal value for local nodes s.. split into parts j..k.
    let mut best = vec![vec![f64::INFINITY; n + 1]; k + 1];
    for s in (k - 1)..n {
        best[k - 1][s] = seg(s, n - 1, k - 1);
    }
    for j in (0..k - 1).rev() {
        let remaining = k - j - 1;
        for s in j..=(n - remaining - 1) {
            let last_end = n - remaining - 1;
            // seg grows with e while best[j+1][e+1] shrinks: find where they cross.
            let (mut lo, mut hi) = (s, last_end);
            while lo < hi {
                let mid = (lo + hi) / 2;
                if seg(s, mid, j) >= best[j + 1][mid + 1] {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            let mut v = seg(s, lo, j).max(best[j + 1][lo + 1]);
            if lo > s {
                v = v.min(seg(s, lo - 1, j).max(best[j + 1][lo]));
            }
            best[j][s] = v;
        }
    }

    let mut positions = Vec::with_capacity(k - 1);
    let mut s = 0;
    for j in 0..k - 1 {
        let remaining = k - j - 1;
        let target = best[j][s];
        let e = (s..=(n - remaining - 1))
            .find(|&e| seg(s, e, j).max(best[j + 1][e + 1]) <= target)
            .expect("optimum is attained");
        positions.push(range.start + e);
        s = e + 1;
    }
    Ok(Cut::new(positions))
}

/// First-crossing traversal over `range` with per-part targets proportional
/// to `shares`. The range's own peak is the total to distribute.
fn first_crossing(g: &ComputationGraph, range: Range<usize>, shares: &[f64]) -> Result<Cut> {
    let parts = shares.len();
    let total_peak = g.peak(range.clone()) as f64;
    let share_sum: f64 = shares.iter().sum();
    let mut positions = Vec::with_capacity(parts - 1);
    let (mut cur, mut peak) = (0i64, 0i64);
    let mut x = 0;
    for i in range.clone() {
        let n = &g.nodes[i];
        cur += (n.m_a + n.m_p) as i64;
        peak = peak.max(cur);
        cur -= n.m_d as i64;
        let reached = peak as f64 * share_sum;
        let target = total_peak * shares[x];
        if reached >= target * (1.0 - 1e-12) {
            positions.push(i);
            x += 1;
            cur = 0;
            peak = 0;
            if x == parts - 1 {
                break;
            }
        }
    }
    if positions.len() < parts - 1 || positions.last().is_some_and(|&p| p + 1 >= range.end) {
        return Err(Error::Degenerate(format!(
            "memory balance yields fewer than {parts} nonempty stages over {} nodes",
            range.len()
        )));
    }
    Ok(Cut::new(positions))
}

fn check_memory_preconditions(g: &ComputationGraph, stages: usize) -> Result<()> {
    if stages < 2 {
        return Err(Error::Degenerate(format!(
            "memory balance needs at least 2 stages, got {stages}"
        )));
    }
    if g.peak(0..g.len()) == 0 {
        return Err(Error::Degenerate("graph peak memory is zero".into()));
    }
    Ok(())
}

/// PipeDream memory balance: targets satisfy
/// `stages * M_1 = ... = (stages - x + 1) * M_x = ... = M_last`.
pub fn memory_balanced_1f1b(g: &ComputationGraph, stages: usize) -> Result<Cut> {
    check_memory_preconditions(g, stages)?;
    let shares: Vec<f64> = (1..=stages)
        .map(|x| Schedule::Async1F1B.memory_share(x, stages))
        .collect();
    first_crossing(g, 0..g.len(), &shares)
}

/// Memory balance for synchronous schedules: equal per-stage targets.
pub fn memory_balanced_sync(g: &ComputationGraph, stages: usize) -> Result<Cut> {
    check_memory_preconditions(g, stages)?;
    first_crossing(g, 0..g.len(), &vec![1.0; stages])
}

pub fn memory_balanced(g: &ComputationGraph, stages: usize, schedule: Schedule) -> Result<Cut> {
    match schedule {
        Schedule::Async1F1B => memory_balanced_1f1b(g, stages),
        Schedule::Sync => memory_balanced_sync(g, stages),
    }
}

/// Two super-stages: `left` covers stages `first..first+left`, `right` the
/// following `right` stages, out of `total` pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SplitSpec {
    pub first_stage: usize,
    pub left_span: usize,
    pub right_span: usize,
    pub total_stages: usize,
    pub schedule: Schedule,
}

impl SplitSpec {
    fn aggregate_share(&self, from: usize, count: usize) -> f64 {
        (from..from + count)
            .map(|x| self.schedule.memory_share(x, self.total_stages))
            .sum()
    }

    /// Smallest and largest legal boundary leaving every stage one node.
    pub fn legal_positions(&self, range: &Range<usize>) -> Option<(usize, usize)> {
        let lo = range.start + self.left_span - 1;
        let hi = range.end.checked_sub(self.right_span + 1)?;
        (lo <= hi).then_some((lo, hi))
    }
}

/// Compute-balanced and memory-balanced boundary between two super-stages.
pub fn comp_mem_bal_split(
    g: &ComputationGraph,
    range: Range<usize>,
    split: SplitSpec,
) -> Result<(usize, usize)> {
    if split.left_span == 0 || split.right_span == 0 {
        return Err(Error::Degenerate("super-stage spans must be at least 1".into()));
    }
    let (lo, hi) = split.legal_positions(&range).ok_or_else(|| {
        Error::Degenerate(format!(
            "{} nodes cannot host {} + {} stages",
            range.len(),
            split.left_span,
            split.right_span
        ))
    })?;
    // boundary between the two spans in the exact per-stage balance, which
    // is reachable at node granularity unlike a span-weighted 2-way split
    let parts = split.left_span + split.right_span;
    let cb = compute_balanced(g, range.clone(), &vec![1.0; parts])?.positions[split.left_span - 1]
        .clamp(lo, hi);

    let shares = [
        split.aggregate_share(split.first_stage, split.left_span),
        split.aggregate_share(split.first_stage + split.left_span, split.right_span),
    ];
    let total_peak = g.peak(range.clone()) as f64;
    let share_sum = shares[0] + shares[1];
    let (mut cur, mut peak) = (0i64, 0i64);
    let mut mb = range.end - 1;
    for i in range.clone() {
        let n = &g.nodes[i];
        cur += (n.m_a + n.m_p) as i64;
        peak = peak.max(cur);
        cur -= n.m_d as i64;
        if peak as f64 * share_sum >= total_peak * shares[0] * (1.0 - 1e-12) {
            mb = i;
            break;
        }
    }
    Ok((cb, mb.clamp(lo, hi)))
}
