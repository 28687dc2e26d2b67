mod common;

use common::random_graph;
use dawnplan::memopt::{collect_candidates, optimize, optimize_exhaustive, peak_without, MemOptAction, StageRequest};
use dawnplan::units::GIB;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn greedy_close_to_exhaustive_on_small_stages() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut compared = 0;
    for i in 0..600u64 {
        let n = rng.gen_range(3..10usize);
        let g = random_graph(90_000 + i, n);
        let weight = rng.gen_range(1..5u64);
        let micro = g.peak(0..n);
        let req = StageRequest {
            graph: &g,
            range: 0..n,
            replica_weight: weight,
            capacity: (weight as f64 * micro as f64 * rng.gen_range(0.4..1.0)) as u64,
            bandwidth_bps: [GIB / 4, GIB, 16 * GIB][rng.gen_range(0..3)],
        };
        let Some(best) = optimize_exhaustive(&req) else { continue };
        let greedy = optimize(&req);
        match (best, greedy) {
            (None, g) => assert!(g.is_none(), "stage {i}: greedy fits where exhaustive cannot"),
            (Some(_), None) => panic!("stage {i}: greedy found nothing"),
            (Some(b), Some(gp)) => {
                compared += 1;
                assert!(gp.added_time >= b.added_time, "stage {i}: exhaustive is not minimal");
                if b.added_time == 0 {
                    assert_eq!(gp.added_time, 0, "stage {i}: free plan missed");
                } else {
                    let r = gp.added_time as f64 / b.added_time as f64;
                    assert!(r <= 1.25, "stage {i}: greedy {} vs exhaustive {}", gp.added_time, b.added_time);
                }
            }
        }
    }
    assert!(compared >= 100, "only {compared} comparable stages");
}

#[test]
fn actions_refer_to_distinct_candidates() {
    for i in 0..200u64 {
        let g = random_graph(7_000 + i, 8);
        let req = StageRequest {
            graph: &g,
            range: 0..8,
            replica_weight: 3,
            capacity: g.peak(0..8) * 2,
            bandwidth_bps: GIB,
        };
        let Some(p) = optimize(&req) else { continue };
        let (swaps, recomputes) = collect_candidates(&g, 0..8, GIB);
        let mut seen = std::collections::HashSet::new();
        for a in &p.actions {
            assert!(seen.insert(a.tensor().to_string()));
            let known = match a {
                MemOptAction::Swap { .. } => swaps.iter().any(|s| s.tensor.id == a.tensor()),
                MemOptAction::Recompute { .. } => recomputes.iter().any(|r| r.tensor.id == a.tensor()),
            };
            assert!(known, "{} is not a candidate", a.tensor());
        }
        assert_eq!(p.added_time, p.actions.iter().map(MemOptAction::overhead).sum::<u64>());
        let removed: Vec<&str> = p.actions.iter().map(MemOptAction::tensor).collect();
        assert!(3 * peak_without(&g, 0..8, &removed, true) <= req.capacity);
    }
}
