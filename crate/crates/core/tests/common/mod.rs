#![allow(dead_code)]

use dawnplan::balance::{compute_balanced, memory_balanced};
use dawnplan::graph::{check_theorem_conditions, NodeRecord, ProfileFile, SavedRecord};
use dawnplan::partitioner::{fixed_plan, PlanConfig};
use dawnplan::units::{GIB, MIB};
use dawnplan::{ComputationGraph, Schedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BANDWIDTH: u64 = 16 * GIB;

/// Random chain of `n` nodes with occasional skip edges, saved outputs and
/// small releases.
pub fn random_graph(seed: u64, n: usize) -> ComputationGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<NodeRecord> = Vec::with_capacity(n);
    let mut clock = 0i64;
    for i in 0..n {
        let t = rng.gen_range(200..3000i64);
        let t_f = t / 3;
        let m_a = rng.gen_range(4..13i64) * MIB as i64 / 4;
        let m_d = if rng.gen_bool(0.2) { m_a / 4 } else { 0 };
        let m_p = if rng.gen_bool(0.3) { rng.gen_range(1..4i64) * MIB as i64 / 4 } else { 0 };
        nodes.push(NodeRecord {
            id: format!("v{i}"),
            depth: i as i64,
            fwd_start_us: clock,
            t_f_us: t_f,
            t_b_us: t - t_f,
            m_a_bytes: m_a,
            m_p_bytes: m_p,
            m_d_bytes: m_d,
            consumers: vec![],
            saved: vec![],
        });
        clock += t_f;
    }
    for i in 0..n - 1 {
        nodes[i].consumers.push(format!("v{}", i + 1));
        if i + 2 < n && rng.gen_bool(0.15) {
            nodes[i].consumers.push(format!("v{}", i + 2));
        }
    }
    for i in 0..n {
        let size = nodes[i].m_a_bytes;
        let reader = if i + 1 < n && rng.gen_bool(0.3) { i + 1 } else { i };
        nodes[i].saved.push(SavedRecord {
            tensor_id: format!("v{i}:out"),
            size_bytes: size.max(1),
            last_backward_access: format!("v{reader}"),
        });
    }
    ComputationGraph::from_profile(ProfileFile {
        schema: 1,
        name: format!("rand-{seed}"),
        nodes,
    })
    .expect("generator emits valid graphs")
}

/// Scheduled peak of the memory-balanced partition without any memory
/// optimization, the natural scale for "tight" capacities.
pub fn reference_peak(g: &ComputationGraph, stages: usize, schedule: Schedule) -> u64 {
    let cut = memory_balanced(g, stages, schedule)
        .or_else(|_| compute_balanced(g, 0..g.len(), &vec![1.0; stages]))
        .expect("graph has at least `stages` nodes");
    let cfg = PlanConfig::new(stages, schedule, u64::MAX, BANDWIDTH);
    let p = fixed_plan(g, &cfg, &cut).unwrap();
    p.stages.iter().map(|s| s.sched_peak_bytes).max().unwrap()
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    pub graph: ComputationGraph,
    pub cfg: PlanConfig,
}

/// Seeded instance with capacity drawn from ample, loose and tight bands.
pub fn random_instance(seed: u64, stages: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.gen_range(12..=24usize);
    let g = random_graph(seed, n);
    let schedule = if rng.gen_bool(0.5) {
        Schedule::Async1F1B
    } else {
        Schedule::Sync
    };
    let reference = reference_peak(&g, stages, schedule);
    let factor = match rng.gen_range(0..3) {
        0 => 4.0,
        1 => 1.15,
        _ => 0.9,
    };
    let cap = (reference as f64 * factor) as u64;
    Instance {
        seed,
        graph: g,
        cfg: PlanConfig::new(stages, schedule, cap, BANDWIDTH),
    }
}

pub fn conditions_hold(g: &ComputationGraph, stages: usize) -> bool {
    check_theorem_conditions(g, stages, BANDWIDTH)
        .map(|r| r.all())
        .unwrap_or(false)
}
