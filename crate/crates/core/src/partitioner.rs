//! Interval-confined search for stage boundaries.
//!
//! The optimal boundary between two (super-)stages is searched only between
//! the compute-balanced and memory-balanced positions. Candidates are tried
//! from the memory-balanced end; once a candidate admits no memory plan the
//! rest of the interval is skipped. More than two stages are handled by
//! recursive halving with memoized sub-results.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::balance::Schedule;
use crate::balance::{comp_mem_bal_split, compute_balanced, stage_profile, Cut, SplitSpec};
use crate::error::{Error, Result};
use crate::graph::ComputationGraph;
use crate::memopt::{self, MemOptAction, MemOptPlan, StageRequest};
use crate::units::transfer_time_us;

pub const PLAN_SCHEMA: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemOptMode {
    #[default]
    Greedy,
    /// Full enumeration on stages with few candidates, greedy otherwise.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub stages: usize,
    pub schedule: Schedule,
    pub capacity_bytes: u64,
    pub bandwidth_bps: u64,
    pub comm_cap: f64,
    /// Residency multiplier for the synchronous schedule.
    pub micro_batches: usize,
    #[serde(default)]
    pub memopt: MemOptMode,
}

impl PlanConfig {
    pub fn new(stages: usize, schedule: Schedule, capacity_bytes: u64, bandwidth_bps: u64) -> Self {
        PlanConfig {
            stages,
            schedule,
            capacity_bytes,
            bandwidth_bps,
            comm_cap: 0.5,
            micro_batches: stages,
            memopt: MemOptMode::Greedy,
        }
    }

    pub fn replica_weight(&self, stage: usize) -> u64 {
        self.schedule
            .replica_weight(stage, self.stages, self.micro_batches)
    }

    fn validate(&self, g: &ComputationGraph) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Degenerate("stage count must be at least 1".into()));
        }
        if self.stages > g.len() {
            return Err(Error::Degenerate(format!(
                "{} stages need at least as many nodes, graph has {}",
                self.stages,
                g.len()
            )));
        }
        if self.bandwidth_bps == 0 {
            return Err(Error::Degenerate("bandwidth must be positive".into()));
        }
        if self.micro_batches == 0 {
            return Err(Error::Degenerate("micro-batch count must be at least 1".into()));
        }
        if !(self.comm_cap.is_finite() && self.comm_cap >= 0.0) {
            return Err(Error::Degenerate(format!("bad comm cap {}", self.comm_cap)));
        }
        Ok(())
    }
}

/// One stage's cost under a fixed boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageEval {
    pub time: u64,
    pub memopt: MemOptPlan,
}

impl StageEval {
    pub fn cost(&self) -> u64 {
        self.time + self.memopt.added_time
    }
}

/// Runs the configured memory optimizer for `range` as stage `stage`.
pub fn evaluate_stage(
    g: &ComputationGraph,
    range: Range<usize>,
    stage: usize,
    cfg: &PlanConfig,
) -> Option<StageEval> {
    let req = StageRequest {
        graph: g,
        range: range.clone(),
        replica_weight: cfg.replica_weight(stage),
        capacity: cfg.capacity_bytes,
        bandwidth_bps: cfg.bandwidth_bps,
    };
    let memopt = match cfg.memopt {
        MemOptMode::Greedy => memopt::optimize(&req),
        MemOptMode::Exhaustive => {
            memopt::optimize_exhaustive(&req).unwrap_or_else(|| memopt::optimize(&req))
        }
    }?;
    Some(StageEval {
        time: g.time(range),
        memopt,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateCut {
    pub position: usize,
    /// Activation bytes crossing the cut, inevitable transfers excluded.
    pub comm_bytes: u64,
    pub est_comm_time: u64,
}

/// Producer/consumer index pairs that cross every cut in `lo..=hi`.
pub fn inevitable_comm(g: &ComputationGraph, lo: usize, hi: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for u in 0..=lo.min(g.len().saturating_sub(1)) {
        for &v in &g.nodes[u].consumers {
            if v > hi {
                edges.push((u, v));
            }
        }
    }
    edges
}

fn crossing(g: &ComputationGraph, pos: usize, skip: &[usize]) -> Vec<usize> {
    g.crossing_producers(pos)
        .into_iter()
        .filter(|u| skip.binary_search(u).is_err())
        .collect()
}

/// Candidate boundaries between two super-stages covering `range`.
///
/// Every position in the interval spanned by `rho_cb` and `rho_mb` is
/// considered. Candidates whose transfer time exceeds `comm_cap` of the
/// smaller per-stage compute time are dropped, unless several activations
/// cross there and they all feed one consumer inside the interval where
/// only one activation crosses; such a position moves to that consumer.
/// The result is ordered from the memory-balanced end toward the
/// compute-balanced end.
/// If filtering removes everything, the memory-balanced position is
/// returned alone.
#[allow(clippy::too_many_arguments)]
pub fn identify_and_sort(
    g: &ComputationGraph,
    range: Range<usize>,
    rho_cb: usize,
    rho_mb: usize,
    left_span: usize,
    right_span: usize,
    bandwidth_bps: u64,
    comm_cap: f64,
) -> Vec<CandidateCut> {
    let (lo, hi) = (rho_cb.min(rho_mb), rho_cb.max(rho_mb));
    let mut skip: Vec<usize> = inevitable_comm(g, lo, hi).into_iter().map(|e| e.0).collect();
    skip.dedup();
    let describe = |p: usize| {
        let bytes = crossing(g, p, &skip).iter().map(|&u| g.nodes[u].m_a).sum();
        CandidateCut {
            position: p,
            comm_bytes: bytes,
            est_comm_time: transfer_time_us(bytes, bandwidth_bps),
        }
    };

    let per_stage = |p: usize| {
        let left = g.time(range.start..p + 1) as f64 / left_span as f64;
        let right = g.time(p + 1..range.end) as f64 / right_span as f64;
        left.min(right)
    };
    let passes = |c: &CandidateCut| c.est_comm_time as f64 <= comm_cap * per_stage(c.position);

    let mut out: Vec<CandidateCut> = Vec::new();
    for p in lo..=hi {
        let mut cand = describe(p);
        let producers = crossing(g, p, &skip);
        if !passes(&cand) && producers.len() >= 2 {
            // several activations cross: try the node where they all join
            let targets: Vec<usize> = producers
                .iter()
                .flat_map(|&u| g.nodes[u].consumers.iter().copied().filter(|&v| v > p))
                .collect();
            let c = targets[0];
            if targets.iter().all(|&v| v == c) && c <= hi && crossing(g, c, &skip).len() == 1 {
                cand = describe(c);
            }
        }
        if passes(&cand) && out.iter().all(|o| o.position != cand.position) {
            out.push(cand);
        }
    }
    if out.is_empty() {
        out.push(describe(rho_mb));
    }
    out.sort_by_key(|c| (c.position.abs_diff(rho_mb), c.position));
    out
}

/// Decisions taken at one level of the recursive search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchLevel {
    pub start: usize,
    pub end: usize,
    /// 1-based stage ids covered by this level.
    pub first_stage: usize,
    pub last_stage: usize,
    pub rho_cb: usize,
    pub rho_mb: usize,
    pub candidates: Vec<usize>,
    pub chosen: usize,
}

impl SearchLevel {
    pub fn interval(&self) -> (usize, usize) {
        (self.rho_cb.min(self.rho_mb), self.rho_cb.max(self.rho_mb))
    }
}

/// Result of searching one node range over consecutive stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubPlan {
    pub cuts: Vec<usize>,
    pub stages: Vec<StageEval>,
    pub min_t: u64,
    pub levels: Vec<SearchLevel>,
}

impl SubPlan {
    fn join(left: SubPlan, cut: usize, right: SubPlan, level: SearchLevel) -> SubPlan {
        let mut cuts = left.cuts;
        cuts.push(cut);
        cuts.extend(right.cuts);
        let mut stages = left.stages;
        stages.extend(right.stages);
        let mut levels = vec![level];
        levels.extend(left.levels);
        levels.extend(right.levels);
        SubPlan {
            cuts,
            stages,
            min_t: left.min_t.max(right.min_t),
            levels,
        }
    }
}

type RangeKey = (usize, usize, usize, usize);

/// Memoizing search state for one graph and configuration.
pub struct Searcher<'g> {
    g: &'g ComputationGraph,
    cfg: PlanConfig,
    stage_memo: Mutex<HashMap<(usize, usize, usize), Option<StageEval>>>,
    memo: Mutex<HashMap<RangeKey, Option<SubPlan>>>,
}

impl<'g> Searcher<'g> {
    pub fn new(g: &'g ComputationGraph, cfg: PlanConfig) -> Self {
        Searcher {
            g,
            cfg,
            stage_memo: Mutex::new(HashMap::new()),
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn stage(&self, range: Range<usize>, stage: usize) -> Option<StageEval> {
        let key = (range.start, range.end, stage);
        if let Some(hit) = self.stage_memo.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let eval = evaluate_stage(self.g, range, stage, &self.cfg);
        self.stage_memo.lock().unwrap().insert(key, eval.clone());
        eval
    }

    fn single(&self, range: Range<usize>, stage: usize) -> Option<SubPlan> {
        let eval = self.stage(range, stage)?;
        Some(SubPlan {
            cuts: vec![],
            min_t: eval.cost(),
            stages: vec![eval],
            levels: vec![],
        })
    }

    fn split(&self, range: &Range<usize>, first: usize, left: usize, right: usize) -> Result<(usize, usize)> {
        comp_mem_bal_split(
            self.g,
            range.clone(),
            SplitSpec {
                first_stage: first,
                left_span: left,
                right_span: right,
                total_stages: self.cfg.stages,
                schedule: self.cfg.schedule,
            },
        )
    }

    /// Two adjacent stages `sid` and `sid + 1` sharing `range`.
    pub fn adjacent_partition(&self, range: Range<usize>, sid: usize) -> Option<SubPlan> {
        let (cb, mb) = self.split(&range, sid, 1, 1).ok()?;
        let g = self.g;
        let fits = |r: Range<usize>, x: usize| {
            self.cfg.replica_weight(x) as u128 * g.peak(r) as u128 <= self.cfg.capacity_bytes as u128
        };
        let level = |candidates: Vec<usize>, chosen: usize| SearchLevel {
            start: range.start,
            end: range.end,
            first_stage: sid,
            last_stage: sid + 1,
            rho_cb: cb,
            rho_mb: mb,
            candidates,
            chosen,
        };
        if fits(range.start..cb + 1, sid) && fits(cb + 1..range.end, sid + 1) {
            let l = self.single(range.start..cb + 1, sid)?;
            let r = self.single(cb + 1..range.end, sid + 1)?;
            return Some(SubPlan::join(l, cb, r, level(vec![cb], cb)));
        }
        let candidates = self.candidates(&range, cb, mb, 1, 1);
        let evals: Vec<Option<(SubPlan, SubPlan)>> = candidates
            .par_iter()
            .map(|&p| {
                let l = self.single(range.start..p + 1, sid)?;
                let r = self.single(p + 1..range.end, sid + 1)?;
                Some((l, r))
            })
            .collect();
        self.reduce(&candidates, evals, |c| level(candidates.clone(), c))
    }

    fn candidates(&self, range: &Range<usize>, cb: usize, mb: usize, l: usize, r: usize) -> Vec<usize> {
        identify_and_sort(
            self.g,
            range.clone(),
            cb,
            mb,
            l,
            r,
            self.cfg.bandwidth_bps,
            self.cfg.comm_cap,
        )
        .into_iter()
        .map(|c| c.position)
        .collect()
    }

    /// Walks candidate results in search order, stopping at the first
    /// infeasible one, and keeps the smallest bottleneck.
    fn reduce(
        &self,
        candidates: &[usize],
        evals: Vec<Option<(SubPlan, SubPlan)>>,
        level: impl Fn(usize) -> SearchLevel,
    ) -> Option<SubPlan> {
        let mut best: Option<(u64, usize, SubPlan, SubPlan)> = None;
        for (&p, eval) in candidates.iter().zip(evals) {
            let Some((l, r)) = eval else { break };
            let t = l.min_t.max(r.min_t);
            if best.as_ref().is_none_or(|(bt, bp, _, _)| (t, p) < (*bt, *bp)) {
                best = Some((t, p, l, r));
            }
        }
        let (_, p, l, r) = best?;
        Some(SubPlan::join(l, p, r, level(p)))
    }

    /// Recursive partition of `range` over stages `first..=last`.
    pub fn bipar(&self, range: Range<usize>, first: usize, last: usize) -> Option<SubPlan> {
        let key = (range.start, range.end, first, last);
        if let Some(hit) = self.memo.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let out = self.bipar_uncached(range, first, last);
        self.memo.lock().unwrap().insert(key, out.clone());
        out
    }

    fn bipar_uncached(&self, range: Range<usize>, first: usize, last: usize) -> Option<SubPlan> {
        let span = last + 1 - first;
        if range.len() < span {
            return None;
        }
        match span {
            1 => return self.single(range, first),
            2 => return self.adjacent_partition(range, first),
            _ => {}
        }
        let mid = if span == 3 { first } else { (first + last) / 2 };
        let (ls, rs) = (mid + 1 - first, last - mid);
        let (cb, mb) = self.split(&range, first, ls, rs).ok()?;
        let candidates = self.candidates(&range, cb, mb, ls, rs);
        let evals: Vec<Option<(SubPlan, SubPlan)>> = candidates
            .par_iter()
            .map(|&p| {
                let l = self.bipar(range.start..p + 1, first, mid)?;
                let r = self.bipar(p + 1..range.end, mid + 1, last)?;
                Some((l, r))
            })
            .collect();
        self.reduce(&candidates, evals, |c| SearchLevel {
            start: range.start,
            end: range.end,
            first_stage: first,
            last_stage: last,
            rho_cb: cb,
            rho_mb: mb,
            candidates: candidates.clone(),
            chosen: c,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRef {
    pub name: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: usize,
    pub first_node: usize,
    pub last_node: usize,
    #[serde(rename = "T_us")]
    pub time_us: u64,
    pub micro_peak_bytes: u64,
    pub sched_peak_bytes: u64,
    pub memopt: Vec<MemOptAction>,
    pub t_moo_us: u64,
    pub effective_saved_bytes: u64,
    /// Scheduled peak after memory optimization.
    pub post_sched_peak_bytes: u64,
    pub fits: bool,
}

impl StagePlan {
    pub fn range(&self) -> Range<usize> {
        self.first_node..self.last_node + 1
    }

    pub fn cost(&self) -> u64 {
        self.time_us + self.t_moo_us
    }

    pub fn post_micro_peak(&self) -> u64 {
        self.micro_peak_bytes - self.effective_saved_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub schema: u64,
    pub graph: GraphRef,
    pub config: PlanConfig,
    pub cuts: Vec<usize>,
    pub stages: Vec<StagePlan>,
    pub bottleneck_us: u64,
    /// Search decisions behind `cuts`; not serialized.
    #[serde(skip)]
    pub search: Vec<SearchLevel>,
}

impl PartitionPlan {
    fn assemble(
        g: &ComputationGraph,
        cfg: &PlanConfig,
        cuts: Vec<usize>,
        memopts: Vec<Option<MemOptPlan>>,
        search: Vec<SearchLevel>,
    ) -> Self {
        let ranges: Vec<Range<usize>> = Cut::new(cuts.clone()).stage_ranges(g.len()).collect();
        let stages: Vec<StagePlan> = ranges
            .into_iter()
            .zip(memopts)
            .enumerate()
            .map(|(i, (r, m))| {
                let x = i + 1;
                let prof = stage_profile(g, r.clone(), x, cfg.stages, cfg.schedule, cfg.micro_batches);
                let fits = m.is_some();
                let m = m.unwrap_or_default();
                let w = cfg.replica_weight(x);
                StagePlan {
                    stage: x,
                    first_node: r.start,
                    last_node: r.end - 1,
                    time_us: prof.time,
                    micro_peak_bytes: prof.micro_peak,
                    sched_peak_bytes: prof.sched_peak,
                    memopt: m.actions,
                    t_moo_us: m.added_time,
                    effective_saved_bytes: m.effective_saved,
                    post_sched_peak_bytes: w * (prof.micro_peak - m.effective_saved),
                    fits,
                }
            })
            .collect();
        let bottleneck_us = stages.iter().map(StagePlan::cost).max().unwrap_or(0);
        PartitionPlan {
            schema: PLAN_SCHEMA,
            graph: GraphRef {
                name: g.name.clone(),
                hash: g.content_hash(),
            },
            config: cfg.clone(),
            cuts,
            stages,
            bottleneck_us,
            search,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.stages.iter().all(|s| s.fits)
    }

    /// Errors unless the plan was made for this graph and is well formed.
    pub fn check_against(&self, g: &ComputationGraph) -> Result<()> {
        if self.schema != PLAN_SCHEMA {
            return Err(Error::Schema {
                found: self.schema,
                expected: PLAN_SCHEMA,
            });
        }
        if self.graph.hash != g.content_hash() {
            return Err(Error::PlanMismatch(format!(
                "plan was made for graph `{}` with a different content hash",
                self.graph.name
            )));
        }
        let cut = Cut::new(self.cuts.clone());
        cut.validate(g.len())?;
        if cut.parts() != self.stages.len() || self.stages.len() != self.config.stages {
            return Err(Error::PlanMismatch("stage count disagrees with cuts".into()));
        }
        for (s, r) in self.stages.iter().zip(cut.stage_ranges(g.len())) {
            if s.range() != r {
                return Err(Error::PlanMismatch(format!("stage {} node range disagrees with cuts", s.stage)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn infeasible(g: &ComputationGraph, cfg: &PlanConfig) -> Error {
    let weights = vec![1.0; cfg.stages];
    let cut = compute_balanced(g, 0..g.len(), &weights)
        .unwrap_or_else(|_| Cut::new((0..cfg.stages - 1).collect()));
    let worst = cut
        .stage_ranges(g.len())
        .enumerate()
        .map(|(i, r)| stage_profile(g, r, i + 1, cfg.stages, cfg.schedule, cfg.micro_batches))
        .max_by(|a, b| a.sched_peak.cmp(&b.sched_peak).then(b.stage.cmp(&a.stage)))
        .expect("at least one stage");
    Error::Infeasible {
        stage: worst.stage,
        sched_peak: worst.sched_peak,
        capacity: cfg.capacity_bytes,
    }
}

/// Full search over `cfg.stages` stages.
pub fn plan(g: &ComputationGraph, cfg: &PlanConfig) -> Result<PartitionPlan> {
    cfg.validate(g)?;
    let searcher = Searcher::new(g, cfg.clone());
    let sub = searcher
        .bipar(0..g.len(), 1, cfg.stages)
        .ok_or_else(|| infeasible(g, cfg))?;
    Ok(PartitionPlan::assemble(
        g,
        cfg,
        sub.cuts,
        sub.stages.into_iter().map(|s| Some(s.memopt)).collect(),
        sub.levels,
    ))
}

/// Plan with given cuts. Stages that cannot be brought under capacity
/// keep an empty action list and are marked as not fitting.
pub fn fixed_plan(g: &ComputationGraph, cfg: &PlanConfig, cut: &Cut) -> Result<PartitionPlan> {
    cfg.validate(g)?;
    cut.validate(g.len())?;
    if cut.parts() != cfg.stages {
        return Err(Error::Degenerate(format!(
            "{} cut positions for {} stages",
            cut.positions.len(),
            cfg.stages
        )));
    }
    let memopts = cut
        .stage_ranges(g.len())
        .enumerate()
        .map(|(i, r)| evaluate_stage(g, r, i + 1, cfg).map(|e| e.memopt))
        .collect();
    Ok(PartitionPlan::assemble(g, cfg, cut.positions.clone(), memopts, vec![]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{node, tri4, uni8};
    use crate::graph::ProfileFile;
    use crate::units::{GIB, MIB};

    fn cfg(stages: usize, schedule: Schedule, cap: u64) -> PlanConfig {
        PlanConfig::new(stages, schedule, cap, 16 * GIB)
    }

    #[test]
    fn inevitable_edges() {
        let mut p = uni8().to_profile();
        p.nodes[0].consumers.push("n7".into());
        let g = ComputationGraph::from_profile(p).unwrap();
        let ev = inevitable_comm(&g, 2, 4);
        assert!(ev.contains(&(0, 7)));
        assert!(!ev.contains(&(3, 4)));
        // collapsed interval: everything crossing that cut
        assert_eq!(inevitable_comm(&g, 3, 3), vec![(0, 7), (3, 4)]);
    }

    #[test]
    fn chain_candidates() {
        let g = uni8();
        let c = identify_and_sort(&g, 0..8, 3, 2, 1, 1, 16 * GIB, 0.5);
        assert_eq!(c.iter().map(|c| c.position).collect::<Vec<_>>(), vec![2, 3]);
        assert!(c.iter().all(|c| c.comm_bytes == MIB));
    }

    fn diamond() -> ComputationGraph {
        let m = MIB as i64;
        ComputationGraph::from_profile(ProfileFile {
            schema: 1,
            name: "diamond".into(),
            nodes: vec![
                node("a", 0, 1000, m, &["b", "c"]),
                node("b", 1, 1000, m, &["d"]),
                node("c", 1, 1000, m, &["d"]),
                node("d", 2, 1000, m / 4, &["e"]),
                node("e", 3, 1000, m, &[]),
            ],
        })
        .unwrap()
    }

    #[test]
    fn lowest_common_leaf_shift() {
        let g = diamond();
        assert_eq!(g.crossing_producers(2).len(), 2);
        // at 1 GiB/s two 1 MiB activations take 1954 us, over half of the
        // 2 ms right side; after d only 256 KiB crosses
        let c = identify_and_sort(&g, 0..5, 2, 3, 1, 1, GIB, 0.5);
        assert_eq!(c.iter().map(|c| c.position).collect::<Vec<_>>(), vec![3]);
        assert_eq!(g.crossing_producers(3).len(), 1);
        assert_eq!(c[0].comm_bytes, MIB / 4);
        // with cheap transfers the two-tensor cut stays a candidate
        let c = identify_and_sort(&g, 0..5, 2, 3, 1, 1, 16 * GIB, 0.5);
        assert_eq!(c.iter().map(|c| c.position).collect::<Vec<_>>(), vec![3, 2]);
    }

    #[test]
    fn comm_filter_falls_back() {
        // every cut severs its own 10 GiB activation; 10 s of transfer
        // against 4 ms stages
        let big = 10 * GIB as i64;
        let g = crate::graph::fixtures::chain("fat", &[4000; 5], &[big; 5]);
        let c = identify_and_sort(&g, 0..5, 1, 3, 1, 1, GIB, 0.5);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].position, 3);
        assert!(c[0].est_comm_time >= 10_000_000);
    }

    #[test]
    fn adjacent_fits_at_compute_balance() {
        let g = uni8();
        let p = plan(&g, &cfg(2, Schedule::Async1F1B, 12 * MIB)).unwrap();
        assert_eq!(p.cuts, vec![3]);
        assert_eq!(p.bottleneck_us, 4000);
        assert!(p.stages.iter().all(|s| s.memopt.is_empty()));
    }

    #[test]
    fn adjacent_moves_toward_memory_balance() {
        let g = uni8();
        let p = plan(&g, &cfg(2, Schedule::Async1F1B, 7 * MIB)).unwrap();
        assert_eq!(p.cuts, vec![2]);
        assert_eq!(p.bottleneck_us, 5000);
        assert_eq!(
            p.stages.iter().map(|s| s.sched_peak_bytes).collect::<Vec<_>>(),
            vec![6 * MIB, 5 * MIB]
        );
    }

    #[test]
    fn adjacent_infeasible_names_stage() {
        let g = uni8();
        match plan(&g, &cfg(2, Schedule::Async1F1B, 2 * MIB)) {
            Err(Error::Infeasible { stage, sched_peak, capacity }) => {
                assert_eq!(stage, 1);
                assert_eq!(sched_peak, 8 * MIB);
                assert_eq!(capacity, 2 * MIB);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn four_uniform_stages() {
        let g = uni8();
        let p = plan(&g, &cfg(4, Schedule::Async1F1B, GIB)).unwrap();
        assert_eq!(p.cuts, vec![1, 3, 5]);
        assert_eq!(p.bottleneck_us, 2000);
    }

    #[test]
    fn tri4_two_stages() {
        let g = tri4();
        let p = plan(&g, &cfg(2, Schedule::Async1F1B, GIB)).unwrap();
        assert_eq!(p.cuts, vec![2]);
        assert_eq!(p.bottleneck_us, 6000);
    }

    #[test]
    fn tri4_tight_cut_in_interval() {
        let g = tri4();
        let p = plan(&g, &cfg(2, Schedule::Async1F1B, 9 * MIB)).unwrap();
        let (lo, hi) = p.search[0].interval();
        assert_eq!((lo, hi), (0, 2));
        assert!((lo..=hi).contains(&p.cuts[0]));
    }

    #[test]
    fn sync_uniform() {
        let g = uni8();
        let p = plan(&g, &cfg(2, Schedule::Sync, GIB)).unwrap();
        assert_eq!(p.cuts, vec![3]);
        assert_eq!(p.bottleneck_us, 4000);
    }

    #[test]
    fn three_stages_handled() {
        let g = uni8();
        let p = plan(&g, &cfg(3, Schedule::Sync, GIB)).unwrap();
        assert_eq!(p.cuts.len(), 2);
        assert_eq!(p.bottleneck_us, 3000);
    }

    #[test]
    fn json_round_trip() {
        let g = uni8();
        let p = plan(&g, &cfg(2, Schedule::Sync, GIB)).unwrap();
        let back = PartitionPlan::from_json(&p.to_json()).unwrap();
        assert_eq!(back.to_json(), p.to_json());
        back.check_against(&g).unwrap();
        assert!(matches!(back.check_against(&tri4()), Err(Error::PlanMismatch(_))));
    }

    #[test]
    fn too_many_stages() {
        assert!(matches!(
            plan(&tri4(), &cfg(5, Schedule::Sync, GIB)),
            Err(Error::Degenerate(_))
        ));
    }
}
