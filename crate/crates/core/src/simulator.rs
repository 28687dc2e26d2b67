//! Discrete-event replay of a partition plan under GPipe-style or 1F1B
//! pipeline schedules.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::balance::{Cut, Schedule};
use crate::error::Result;
use crate::graph::ComputationGraph;
use crate::memopt::{peak_without, MemOptAction};
use crate::partitioner::PartitionPlan;
use crate::units::transfer_time_us;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub micro_batches: usize,
    pub schedule: Schedule,
    /// `None` makes inter-stage transfers instantaneous.
    pub bandwidth_bps: Option<u64>,
    pub capacity: u64,
}

impl SimConfig {
    /// `m = ℓ` for sync, `m = 4ℓ` for 1F1B.
    pub fn default_micro_batches(schedule: Schedule, stages: usize) -> usize {
        match schedule {
            Schedule::Sync => stages,
            Schedule::Async1F1B => 4 * stages,
        }
    }

    pub fn for_plan(plan: &PartitionPlan) -> Self {
        let c = &plan.config;
        SimConfig {
            micro_batches: Self::default_micro_batches(c.schedule, c.stages),
            schedule: c.schedule,
            bandwidth_bps: Some(c.bandwidth_bps),
            capacity: c.capacity_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Fwd,
    Bwd,
    /// Activation transfer to the next stage.
    CommFwd,
    /// Gradient transfer to the previous stage.
    CommBwd,
}

impl OpKind {
    fn as_str(self) -> &'static str {
        match self {
            OpKind::Fwd => "fwd",
            OpKind::Bwd => "bwd",
            OpKind::CommFwd => "comm_fwd",
            OpKind::CommBwd => "comm_bwd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Steady,
    Cooldown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// 1-based; for transfers, the sending stage.
    pub stage: usize,
    /// 1-based micro-batch.
    pub mb: usize,
    pub kind: OpKind,
    pub phase: Phase,
    pub start_us: u64,
    pub end_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schedule: Schedule,
    pub micro_batches: usize,
    pub per_stage_peak: Vec<u64>,
    pub per_stage_busy_us: Vec<u64>,
    pub makespan_us: u64,
    /// Whole iteration for sync, steady-state time per micro-batch for 1F1B.
    pub iteration_time_us: f64,
    /// Micro-batches per second.
    pub throughput: f64,
    pub bubble_ratio: f64,
    pub waste_ratio: f64,
    /// 1-based stages whose simulated peak exceeds capacity.
    pub over_capacity: Vec<usize>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

impl SimReport {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "mb", "kind", "start_us", "end_us"])?;
        for e in &self.trace {
            w.write_record([
                e.stage.to_string(),
                e.mb.to_string(),
                e.kind.as_str().to_string(),
                e.start_us.to_string(),
                e.end_us.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// `Σ (max − p) / (ℓ · max)`, zero when every peak is zero.
pub fn waste_ratio(peaks: &[u64]) -> f64 {
    let max = peaks.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return 0.0;
    }
    let gap: u64 = peaks.iter().map(|&p| max - p).sum();
    gap as f64 / (peaks.len() as f64 * max as f64)
}

/// Per-stage timing inputs of the event loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageTiming {
    pub fwd: u64,
    pub bwd: u64,
    /// Transfer time to the next stage (both directions).
    pub comm_next: u64,
}

#[derive(Debug, Clone, Copy)]
struct Op {
    kind: OpKind,
    mb: usize,
    phase: Phase,
}

fn stage_order(schedule: Schedule, x: usize, stages: usize, m: usize) -> Vec<Op> {
    let f = |mb, phase| Op { kind: OpKind::Fwd, mb, phase };
    let b = |mb, phase| Op { kind: OpKind::Bwd, mb, phase };
    match schedule {
        Schedule::Sync => (1..=m)
            .map(|j| f(j, Phase::Steady))
            .chain((1..=m).rev().map(|j| b(j, Phase::Steady)))
            .collect(),
        Schedule::Async1F1B => {
            let warm = (stages - x).min(m);
            let mut ops: Vec<Op> = (1..=warm).map(|j| f(j, Phase::Warmup)).collect();
            for k in 0..m - warm {
                ops.push(f(warm + k + 1, Phase::Steady));
                ops.push(b(k + 1, Phase::Steady));
            }
            ops.extend((m - warm + 1..=m).map(|j| b(j, Phase::Cooldown)));
            ops
        }
    }
}

/// Event loop over fixed per-stage operation orders. Returns the trace and
/// makespan.
pub fn run_schedule(timing: &[StageTiming], schedule: Schedule, m: usize) -> (Vec<TraceEvent>, u64) {
    assert!(m >= 1, "need at least one micro-batch");
    let l = timing.len();
    let orders: Vec<Vec<Op>> = (1..=l).map(|x| stage_order(schedule, x, l, m)).collect();
    // arrival[x][j]: when micro-batch j's input is available on stage x
    let mut fwd_arrival = vec![vec![None::<u64>; m + 1]; l];
    let mut bwd_arrival = vec![vec![None::<u64>; m + 1]; l];
    for j in 1..=m {
        fwd_arrival[0][j] = Some(0);
    }
    let mut next = vec![0usize; l];
    let mut free = vec![0u64; l];
    // serial channels per link: [link][0 = forward, 1 = backward]
    let mut chan = vec![[0u64; 2]; l.saturating_sub(1)];
    let mut fwd_done = 0usize;
    let mut barrier: Option<u64> = None;
    let mut trace = Vec::with_capacity(l * m * 4);

    let total_ops: usize = orders.iter().map(Vec::len).sum();
    let mut done = 0usize;
    while done < total_ops {
        let mut progressed = false;
        for x in 0..l {
            while let Some(op) = orders[x].get(next[x]).copied() {
                let ready = match op.kind {
                    OpKind::Fwd => fwd_arrival[x][op.mb],
                    OpKind::Bwd if schedule == Schedule::Sync => {
                        let up = if x + 1 == l { Some(0) } else { bwd_arrival[x][op.mb] };
                        match (barrier, up) {
                            (Some(b), Some(u)) => Some(b.max(u)),
                            _ => None,
                        }
                    }
                    OpKind::Bwd if x + 1 == l => Some(0),
                    OpKind::Bwd => bwd_arrival[x][op.mb],
                    _ => unreachable!(),
                };
                let Some(ready) = ready else { break };
                let t = timing[x];
                let start = ready.max(free[x]);
                let end = start + if op.kind == OpKind::Fwd { t.fwd } else { t.bwd };
                free[x] = end;
                trace.push(TraceEvent {
                    stage: x + 1,
                    mb: op.mb,
                    kind: op.kind,
                    phase: op.phase,
                    start_us: start,
                    end_us: end,
                });
                match op.kind {
                    OpKind::Fwd => {
                        if x + 1 < l {
                            let cs = end.max(chan[x][0]);
                            let ce = cs + t.comm_next;
                            chan[x][0] = ce;
                            fwd_arrival[x + 1][op.mb] = Some(ce);
                            trace.push(TraceEvent {
                                stage: x + 1,
                                mb: op.mb,
                                kind: OpKind::CommFwd,
                                phase: op.phase,
                                start_us: cs,
                                end_us: ce,
                            });
                        }
                        fwd_done += 1;
                        if fwd_done == l * m {
                            barrier = Some(free.iter().copied().max().unwrap_or(0));
                        }
                    }
                    _ => {
                        if x > 0 {
                            let c = timing[x - 1].comm_next;
                            let cs = end.max(chan[x - 1][1]);
                            let ce = cs + c;
                            chan[x - 1][1] = ce;
                            bwd_arrival[x - 1][op.mb] = Some(ce);
                            trace.push(TraceEvent {
                                stage: x + 1,
                                mb: op.mb,
                                kind: OpKind::CommBwd,
                                phase: op.phase,
                                start_us: cs,
                                end_us: ce,
                            });
                        }
                    }
                }
                next[x] += 1;
                done += 1;
                progressed = true;
            }
        }
        assert!(progressed, "schedule deadlocked");
    }
    let makespan = trace.iter().map(|e| e.end_us).max().unwrap_or(0);
    trace.sort_by_key(|e| (e.start_us, e.stage, e.mb, e.kind as u8));
    (trace, makespan)
}

fn stage_timings(g: &ComputationGraph, plan: &PartitionPlan, cfg: &SimConfig) -> Vec<StageTiming> {
    plan.stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = s.range();
            let comm_next = match (plan.cuts.get(i), cfg.bandwidth_bps) {
                (Some(&p), Some(bw)) => transfer_time_us(g.crossing_bytes(p), bw),
                _ => 0,
            };
            StageTiming {
                fwd: g.fwd_time(r.clone()),
                bwd: g.bwd_time(r) + s.t_moo_us,
                comm_next,
            }
        })
        .collect()
}

/// Replays `plan` on `g`. Fails only if the plan does not belong to `g`.
pub fn simulate(plan: &PartitionPlan, g: &ComputationGraph, cfg: &SimConfig) -> Result<SimReport> {
    plan.check_against(g)?;
    let l = plan.stages.len();
    let m = cfg.micro_batches;
    assert!(m >= 1, "need at least one micro-batch");
    let timing = stage_timings(g, plan, cfg);
    let (trace, makespan) = run_schedule(&timing, cfg.schedule, m);

    let mut busy = vec![0u64; l];
    for e in &trace {
        if matches!(e.kind, OpKind::Fwd | OpKind::Bwd) {
            busy[e.stage - 1] += e.end_us - e.start_us;
        }
    }
    let bubble_ratio = if makespan == 0 {
        0.0
    } else {
        1.0 - busy.iter().sum::<u64>() as f64 / (l as f64 * makespan as f64)
    };

    let per_stage_peak: Vec<u64> = plan
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let removed: Vec<&str> = s.memopt.iter().map(MemOptAction::tensor).collect();
            match cfg.schedule {
                Schedule::Async1F1B => {
                    max_in_flight(&trace, i + 1) * peak_without(g, s.range(), &removed, true)
                }
                Schedule::Sync => {
                    m as u64 * peak_without(g, s.range(), &removed, false)
                        + g.param_bytes(s.range())
                }
            }
        })
        .collect();
    let over_capacity = per_stage_peak
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > cfg.capacity)
        .map(|(i, _)| i + 1)
        .collect();

    let iteration_time_us = match cfg.schedule {
        Schedule::Sync => makespan as f64,
        Schedule::Async1F1B => steady_gap(&trace, l, m).unwrap_or(makespan as f64 / m as f64),
    };
    let throughput = match cfg.schedule {
        Schedule::Sync if makespan > 0 => m as f64 * 1e6 / makespan as f64,
        Schedule::Async1F1B if iteration_time_us > 0.0 => 1e6 / iteration_time_us,
        _ => f64::INFINITY,
    };

    Ok(SimReport {
        schedule: cfg.schedule,
        micro_batches: m,
        waste_ratio: waste_ratio(&per_stage_peak),
        per_stage_peak,
        per_stage_busy_us: busy,
        makespan_us: makespan,
        iteration_time_us,
        throughput,
        bubble_ratio,
        over_capacity,
        trace,
    })
}

/// Largest number of micro-batches whose forward has started on `stage`
/// but whose backward has not finished.
fn max_in_flight(trace: &[TraceEvent], stage: usize) -> u64 {
    let mut points: Vec<(u64, i64)> = Vec::new();
    for e in trace.iter().filter(|e| e.stage == stage) {
        match e.kind {
            OpKind::Fwd => points.push((e.start_us, 1)),
            OpKind::Bwd => points.push((e.end_us, -1)),
            _ => {}
        }
    }
    // releases at an instant happen before allocations at that instant
    points.sort();
    let (mut cur, mut best) = (0i64, 0i64);
    for (_, d) in points {
        cur += d;
        best = best.max(cur);
    }
    best as u64
}

/// Mean gap between consecutive micro-batch completions on stage 1 after
/// the pipeline has filled.
fn steady_gap(trace: &[TraceEvent], stages: usize, m: usize) -> Option<f64> {
    if m <= stages {
        return None;
    }
    let done = |j: usize| {
        trace
            .iter()
            .find(|e| e.stage == 1 && e.mb == j && e.kind == OpKind::Bwd)
            .map(|e| e.end_us)
    };
    Some((done(m)? - done(stages)?) as f64 / (m - stages) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub memory_balanced: SimReport,
    pub compute_balanced: SimReport,
    /// Throughput of the compute-balanced plan over the memory-balanced one.
    pub throughput_ratio: f64,
}

/// Simulates two plans over the same graph and compares throughput.
pub fn appendix_a_scenario(
    g: &ComputationGraph,
    memory_balanced: &PartitionPlan,
    compute_balanced: &PartitionPlan,
    cfg: &SimConfig,
) -> Result<ScenarioReport> {
    let a = simulate(memory_balanced, g, cfg)?;
    let b = simulate(compute_balanced, g, cfg)?;
    Ok(ScenarioReport {
        throughput_ratio: b.throughput / a.throughput,
        memory_balanced: a,
        compute_balanced: b,
    })
}

/// Stage ranges of a plan, for callers holding only cuts.
pub fn plan_ranges(plan: &PartitionPlan, n: usize) -> Vec<std::ops::Range<usize>> {
    Cut::new(plan.cuts.clone()).stage_ranges(n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::uni8;
    use crate::partitioner::{fixed_plan, plan, PlanConfig};
    use crate::units::{GIB, MIB};

    fn uniform(stages: usize, f: u64, b: u64) -> Vec<StageTiming> {
        vec![StageTiming { fwd: f, bwd: b, comm_next: 0 }; stages]
    }

    #[test]
    fn gpipe_closed_form() {
        let (trace, makespan) = run_schedule(&uniform(4, 500, 1000), Schedule::Sync, 4);
        assert_eq!(makespan, 7 * 1500);
        let compute = trace
            .iter()
            .filter(|e| matches!(e.kind, OpKind::Fwd | OpKind::Bwd))
            .count();
        assert_eq!(compute, 32);
        assert_eq!(trace.len(), 32 + 2 * 3 * 4);
    }

    #[test]
    fn one_f_one_b_warmup_counts() {
        for l in [2usize, 4, 8] {
            let (trace, _) = run_schedule(&uniform(l, 100, 200), Schedule::Async1F1B, 4 * l);
            for x in 1..=l {
                let warm = trace
                    .iter()
                    .filter(|e| e.stage == x && e.kind == OpKind::Fwd && e.phase == Phase::Warmup)
                    .count();
                assert_eq!(warm, l - x);
            }
        }
    }

    #[test]
    fn dependencies_respected_with_comm() {
        let mut t = uniform(3, 300, 600);
        t[0].comm_next = 250;
        t[1].comm_next = 50;
        for sched in [Schedule::Sync, Schedule::Async1F1B] {
            let (trace, _) = run_schedule(&t, sched, 6);
            let find = |s, j, k| {
                trace
                    .iter()
                    .find(|e| e.stage == s && e.mb == j && e.kind == k)
                    .copied()
                    .unwrap()
            };
            for j in 1..=6 {
                for x in 2..=3 {
                    let f = find(x, j, OpKind::Fwd);
                    let prev = find(x - 1, j, OpKind::Fwd);
                    assert!(f.start_us >= prev.end_us + t[x - 2].comm_next);
                    let b = find(x - 1, j, OpKind::Bwd);
                    let later = find(x, j, OpKind::Bwd);
                    assert!(b.start_us >= later.end_us + t[x - 2].comm_next);
                }
            }
        }
    }

    #[test]
    fn waste_formula() {
        assert!((waste_ratio(&[6 * MIB, 5 * MIB]) - 1.0 / 12.0).abs() < 1e-12);
        assert_eq!(waste_ratio(&[0, 0]), 0.0);
    }

    #[test]
    fn uni8_async_peaks() {
        let g = uni8();
        let cfg = PlanConfig::new(2, Schedule::Async1F1B, 7 * MIB, 16 * GIB);
        let p = plan(&g, &cfg).unwrap();
        let r = simulate(&p, &g, &SimConfig::for_plan(&p)).unwrap();
        assert_eq!(r.per_stage_peak, vec![6 * MIB, 5 * MIB]);
        assert!((r.waste_ratio - 1.0 / 12.0).abs() < 1e-12);
        assert!(r.over_capacity.is_empty());
    }

    #[test]
    fn over_capacity_is_flagged() {
        let g = uni8();
        let cfg = PlanConfig::new(2, Schedule::Async1F1B, 7 * MIB, 16 * GIB);
        let p = fixed_plan(&g, &cfg, &Cut::new(vec![3])).unwrap();
        assert!(!p.is_feasible());
        let r = simulate(&p, &g, &SimConfig::for_plan(&p)).unwrap();
        assert_eq!(r.over_capacity, vec![1]);
    }
}
