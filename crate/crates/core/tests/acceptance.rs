//! End-to-end acceptance checks, one line per criterion.

mod common;

use std::path::Path;
use std::time::Instant;

use common::*;
use dawnplan::balance::{compute_balanced, memory_balanced_1f1b, stage_profile, Cut};
use dawnplan::graph::load_profile;
use dawnplan::memopt::{optimize, peak_without, MemOptAction, StageRequest};
use dawnplan::oracle::{exhaustive_plan, verify_theorem};
use dawnplan::partitioner::{fixed_plan, plan, PlanConfig};
use dawnplan::simulator::{appendix_a_scenario, simulate, OpKind, Phase, SimConfig};
use dawnplan::synthgen::{gen_appendix_a, gen_cnn_like, gen_uniform};
use dawnplan::units::{GIB, MIB};
use dawnplan::{ComputationGraph, Schedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn fixture(name: &str) -> ComputationGraph {
    load_profile(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name))
        .expect("fixture loads")
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let (mut accepted, mut worst, mut skipped_infeasible) = (0, 1.0f64, 0);
    let mut failures = Vec::new();
    let mut seed = 0u64;
    while accepted < 100 {
        let stages = if seed % 2 == 0 { 2 } else { 4 };
        let inst = random_instance(seed, stages);
        seed += 1;
        if !conditions_hold(&inst.graph, stages) {
            continue;
        }
        let Ok(best) = exhaustive_plan(&inst.graph, &inst.cfg) else {
            skipped_infeasible += 1;
            continue;
        };
        accepted += 1;
        match plan(&inst.graph, &inst.cfg) {
            Ok(p) => {
                let r = p.bottleneck_us as f64 / best.bottleneck_us as f64;
                worst = worst.max(r);
                if r > 1.01 {
                    failures.push(format!("seed {} ratio {r:.4}", inst.seed));
                }
            }
            Err(e) => failures.push(format!("seed {}: {e}", inst.seed)),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "{accepted} instances, worst planner/oracle {worst:.4}, {skipped_infeasible} infeasible draws skipped, {secs:.1} s"
    );
    if failures.is_empty() && secs < 60.0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; {failures:?}"))
    }
}

fn theorem_containment() -> Outcome {
    let (mut checked, mut inside) = (0, 0);
    let mut outside = Vec::new();
    let mut seed = 1_000_000u64;
    while checked < 100 {
        let inst = random_instance(seed, 2);
        seed += 1;
        let Ok(v) = verify_theorem(&inst.graph, &inst.cfg) else { continue };
        if !v.claim_applies {
            continue;
        }
        checked += 1;
        if v.inside {
            inside += 1;
        } else {
            outside.push((inst.seed, v.interval, v.optimal_cuts));
        }
    }
    let detail = format!("{inside}/{checked} optimal cuts inside the interval");
    if inside == checked {
        Ok(detail)
    } else {
        Err(format!("{detail}; outside: {outside:?}"))
    }
}

fn alg2_fidelity() -> Outcome {
    let check = |name: &str, want_cut: usize, want: (u64, u64)| -> Result<(), String> {
        let g = fixture(name);
        let cut = memory_balanced_1f1b(&g, 2).map_err(|e| e.to_string())?;
        let peaks: Vec<u64> = cut
            .stage_ranges(g.len())
            .enumerate()
            .map(|(i, r)| stage_profile(&g, r, i + 1, 2, Schedule::Async1F1B, 2).sched_peak)
            .collect();
        if cut.positions == [want_cut] && peaks == [want.0 * MIB, want.1 * MIB] {
            Ok(())
        } else {
            Err(format!("{name}: cut {:?} peaks {:?}", cut.positions, peaks))
        }
    };
    check("uni8.json", 2, (6, 5))?;
    check("tri4.json", 0, (8, 6))?;
    Ok("uni8 cut after node 3 with (6,5) MiB, tri4 after node 1 with (8,6) MiB".into())
}

fn analytic_schedule() -> Outcome {
    let g = gen_uniform(8, 1000, MIB).unwrap();
    let cfg = PlanConfig::new(4, Schedule::Sync, GIB, 16 * GIB);
    let p = plan(&g, &cfg).map_err(|e| e.to_string())?;
    let sim = SimConfig {
        micro_batches: 4,
        schedule: Schedule::Sync,
        bandwidth_bps: None,
        capacity: GIB,
    };
    let r = simulate(&p, &g, &sim).map_err(|e| e.to_string())?;
    // two 1 ms nodes per stage: F = B = 1000 us
    let expected = (4 + 4 - 1) as f64 * 2000.0;
    let bubble_ok = (r.bubble_ratio - 3.0 / 7.0).abs() <= 1e-9;
    let time_ok = (r.iteration_time_us - expected).abs() <= 1.0;
    let detail = format!(
        "bubble {:.12} (3/7), iteration {} us (expected {expected})",
        r.bubble_ratio, r.iteration_time_us
    );
    if bubble_ok && time_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn one_f_one_b_structure() -> Outcome {
    let mut notes = Vec::new();
    for stages in [2usize, 4, 8] {
        let g = gen_uniform(16, 1000, MIB).unwrap();
        let cfg = PlanConfig::new(stages, Schedule::Async1F1B, 64 * GIB, 16 * GIB);
        let p = plan(&g, &cfg).map_err(|e| e.to_string())?;
        let r = simulate(&p, &g, &SimConfig::for_plan(&p)).map_err(|e| e.to_string())?;
        for x in 1..=stages {
            let ops: Vec<_> = r
                .trace
                .iter()
                .filter(|e| e.stage == x && matches!(e.kind, OpKind::Fwd | OpKind::Bwd))
                .collect();
            let first_bwd = ops.iter().position(|e| e.kind == OpKind::Bwd).unwrap();
            let warm = ops[..first_bwd]
                .iter()
                .filter(|e| e.phase == Phase::Warmup)
                .count();
            let warm_total = ops.iter().filter(|e| e.phase == Phase::Warmup).count();
            if warm != stages - x || warm_total != warm {
                return Err(format!("l={stages} stage {x}: {warm} warm-up forwards"));
            }
        }
        notes.push(format!("l={stages}"));
    }
    Ok(format!("stage x runs l-x warm-up forwards for {}", notes.join(", ")))
}

fn memory_waste() -> Outcome {
    let g = gen_cnn_like(16, 7).unwrap();
    let bandwidth = GIB;
    let cb = compute_balanced(&g, 0..g.len(), &[1.0; 4]).map_err(|e| e.to_string())?;
    let unlimited = PlanConfig::new(4, Schedule::Sync, u64::MAX / 8, bandwidth);
    let base = fixed_plan(&g, &unlimited, &cb).map_err(|e| e.to_string())?;
    let sim = SimConfig::for_plan(&base);
    let base_sim = simulate(&base, &g, &sim).map_err(|e| e.to_string())?;
    let base_max = *base_sim.per_stage_peak.iter().max().unwrap();
    // device memory at 40% of the compute-balanced worst stage
    let cfg = PlanConfig::new(4, Schedule::Sync, base_max * 2 / 5, bandwidth);
    let planned = plan(&g, &cfg).map_err(|e| e.to_string())?;
    let planned_sim = simulate(&planned, &g, &sim).map_err(|e| e.to_string())?;
    let (wb, wp) = (base_sim.waste_ratio, planned_sim.waste_ratio);
    let detail = format!(
        "compute-balanced waste {wb:.3}, planner waste {wp:.3} ({:.2}x), bottleneck {} -> {} us",
        wp / wb,
        base.bottleneck_us,
        planned.bottleneck_us
    );
    if wb >= 0.25 && wp <= 0.6 * wb {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn appendix_a() -> Outcome {
    let g = gen_appendix_a();
    let cfg = PlanConfig::new(4, Schedule::Async1F1B, 112 * MIB, 512 * MIB);
    let mb = memory_balanced_1f1b(&g, 4).map_err(|e| e.to_string())?;
    let mem_plan = fixed_plan(&g, &cfg, &mb).map_err(|e| e.to_string())?;
    let comp_plan = fixed_plan(&g, &cfg, &Cut::new(vec![2, 4, 5])).map_err(|e| e.to_string())?;
    let mut sim = SimConfig::for_plan(&mem_plan);
    sim.bandwidth_bps = None;
    let r = appendix_a_scenario(&g, &mem_plan, &comp_plan, &sim).map_err(|e| e.to_string())?;
    let costs = |p: &dawnplan::PartitionPlan| p.stages.iter().map(|s| s.cost()).collect::<Vec<_>>();
    let detail = format!(
        "stage costs {:?} vs {:?}, throughput ratio {:.3}",
        costs(&mem_plan),
        costs(&comp_plan),
        r.throughput_ratio
    );
    if r.throughput_ratio >= 1.9 && mem_plan.is_feasible() && comp_plan.is_feasible() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn memopt_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut returned, mut zero_cost, mut monotone_pairs) = (0, 0, 0);
    for i in 0..1000u64 {
        let n = rng.gen_range(3..12usize);
        let g = random_graph(50_000 + i, n);
        let weight = rng.gen_range(1..5u64);
        let bandwidth = [GIB / 4, GIB, 16 * GIB][rng.gen_range(0..3)];
        let micro = g.peak(0..n);
        let full = weight * micro;
        let cap = (full as f64 * rng.gen_range(0.3..1.1)) as u64;
        let req = |capacity| StageRequest {
            graph: &g,
            range: 0..n,
            replica_weight: weight,
            capacity,
            bandwidth_bps: bandwidth,
        };
        let a = optimize(&req(cap));
        if let Some(p) = &a {
            returned += 1;
            let removed: Vec<&str> = p.actions.iter().map(MemOptAction::tensor).collect();
            let after = peak_without(&g, 0..n, &removed, true);
            if after != micro - p.effective_saved || weight * after > cap {
                return Err(format!("stage {i}: capacity inequality violated"));
            }
            let free_swaps_only = p.actions.iter().all(|a| {
                matches!(a, MemOptAction::Swap { free_time_us, .. } if *free_time_us >= 0)
            });
            if free_swaps_only {
                zero_cost += 1;
                if p.added_time != 0 {
                    return Err(format!("stage {i}: free swaps cost {} us", p.added_time));
                }
            }
        }
        let bigger = cap + (full as f64 * rng.gen_range(0.0..0.5)) as u64;
        let b = optimize(&req(bigger));
        match (&a, &b) {
            (Some(pa), Some(pb)) if pb.added_time > pa.added_time => {
                return Err(format!("stage {i}: more capacity cost more time"));
            }
            (Some(_), None) => return Err(format!("stage {i}: more capacity became infeasible")),
            _ => {}
        }
        monotone_pairs += 1;
    }
    Ok(format!(
        "{returned} plans fit exactly, {zero_cost} free-swap plans cost 0, {monotone_pairs} monotone pairs"
    ))
}

fn determinism() -> Outcome {
    let inputs = [
        (dawnplan::synthgen::gen_transformer_like(4, 3).unwrap(), 4usize),
        (random_instance(77, 4).graph, 4),
        (gen_cnn_like(8, 1).unwrap(), 2),
    ];
    for (g, stages) in &inputs {
        let cfg = PlanConfig::new(*stages, Schedule::Async1F1B, reference_peak(g, *stages, Schedule::Async1F1B), 4 * GIB);
        let mut outputs = Vec::new();
        for threads in [1usize, 2, 8, 8] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let text = pool.install(|| plan(g, &cfg)).map(|p| p.to_json()).map_err(|e| e.to_string())?;
            outputs.push(text);
        }
        if outputs.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("{}: plan JSON differs across runs", g.name));
        }
    }
    Ok(format!("{} inputs byte-identical across 1/2/8 threads and repeated runs", inputs.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 oracle equivalence", oracle_equivalence),
        ("2 interval containment", theorem_containment),
        ("3 memory-balance fidelity", alg2_fidelity),
        ("4 analytic GPipe schedule", analytic_schedule),
        ("5 1F1B warm-up structure", one_f_one_b_structure),
        ("6 memory-waste reduction", memory_waste),
        ("7 calibrated 4-stage scenario", appendix_a),
        ("8 memopt contracts", memopt_contracts),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
