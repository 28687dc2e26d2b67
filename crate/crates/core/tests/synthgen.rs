use dawnplan::synthgen::{gen_cnn_like, gen_transformer_like, gen_uniform, time_memory_correlation};
use dawnplan::ComputationGraph;

fn assert_valid(g: &ComputationGraph) {
    let back = ComputationGraph::from_json(&g.to_json()).unwrap();
    assert_eq!(&back, g);
    assert!(g.nodes.iter().all(|n| n.time() > 0));
    for (i, n) in g.nodes.iter().enumerate() {
        assert!(n.consumers.iter().all(|&v| v > i));
    }
    for t in g.tensors() {
        assert!(t.producer <= t.last_backward_access && t.size > 0);
    }
}

#[test]
fn generators_emit_valid_graphs() {
    for seed in 0..10 {
        for layers in [2, 3, 8, 24] {
            assert_valid(&gen_transformer_like(layers, seed).unwrap());
            assert_valid(&gen_cnn_like(layers.max(4), seed).unwrap());
        }
    }
    assert_valid(&gen_uniform(50, 300, 1 << 20).unwrap());
}

#[test]
fn correlation_bands() {
    for seed in 0..10 {
        let t = time_memory_correlation(&gen_transformer_like(12, seed).unwrap());
        let c = time_memory_correlation(&gen_cnn_like(16, seed).unwrap());
        assert!(t >= 0.8, "transformer seed {seed}: {t}");
        assert!(c <= 0.1, "cnn seed {seed}: {c}");
    }
}

#[test]
fn seeds_matter_and_repeat() {
    let a = gen_transformer_like(6, 1).unwrap();
    assert_eq!(a, gen_transformer_like(6, 1).unwrap());
    assert_ne!(a.content_hash(), gen_transformer_like(6, 2).unwrap().content_hash());
}
