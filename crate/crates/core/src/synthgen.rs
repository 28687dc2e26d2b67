//! Seeded synthetic profiles.
//!
//! Transformer-like graphs keep node time roughly proportional to
//! activation size. CNN-like graphs pair heavy, small-output convolutions
//! with light, large-output normalization and activation nodes, and shrink
//! activations with depth while compute grows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ComputationGraph, NodeRecord, ProfileFile, SavedRecord, PROFILE_SCHEMA};
use crate::units::MIB;

/// Activation size most transformer-like nodes stay under.
pub const TRANSFORMER_ACTIVATION_CAP: u64 = 16 * MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    Uniform,
    Transformer,
    Cnn,
}

/// Scale knobs shared by the seeded generators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub time_us: f64,
    pub mem_bytes: f64,
}

impl Default for Scale {
    fn default() -> Self {
        Scale {
            time_us: 10.0,
            mem_bytes: MIB as f64,
        }
    }
}

struct Builder {
    name: String,
    nodes: Vec<NodeRecord>,
    depth: Vec<i64>,
    clock: i64,
}

impl Builder {
    fn new(name: impl Into<String>) -> Self {
        Builder {
            name: name.into(),
            nodes: vec![],
            depth: vec![],
            clock: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add(&mut self, id: String, t_f: i64, t_b: i64, m_a: i64, m_p: i64, m_d: i64, inputs: &[usize]) -> usize {
        let depth = inputs.iter().map(|&i| self.depth[i] + 1).max().unwrap_or(0);
        for &i in inputs {
            self.nodes[i].consumers.push(id.clone());
        }
        self.nodes.push(NodeRecord {
            id,
            depth,
            fwd_start_us: self.clock,
            t_f_us: t_f,
            t_b_us: t_b,
            m_a_bytes: m_a,
            m_p_bytes: m_p,
            m_d_bytes: m_d,
            consumers: vec![],
            saved: vec![],
        });
        self.depth.push(depth);
        self.clock += t_f;
        self.nodes.len() - 1
    }

    fn save(&mut self, at: usize, tensor: String, size: i64, read_by: usize) {
        let reader = self.nodes[read_by].id.clone();
        self.nodes[at].saved.push(SavedRecord {
            tensor_id: tensor,
            size_bytes: size,
            last_backward_access: reader,
        });
    }

    /// Each node keeps its output until the backward of its earliest
    /// consumer, which runs last among its readers.
    fn save_outputs(&mut self) {
        let index: std::collections::HashMap<String, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        for i in 0..self.nodes.len() {
            let size = self.nodes[i].m_a_bytes;
            if size == 0 {
                continue;
            }
            let reader = self.nodes[i]
                .consumers
                .iter()
                .map(|c| index[c])
                .min()
                .unwrap_or(i);
            let id = format!("{}:out", self.nodes[i].id);
            self.save(i, id, size, reader);
        }
    }

    fn finish(self) -> Result<ComputationGraph> {
        ComputationGraph::from_profile(ProfileFile {
            schema: PROFILE_SCHEMA,
            name: self.name,
            nodes: self.nodes,
        })
    }
}

/// Chain of `n` identical nodes, each saving its output for its own
/// backward.
pub fn gen_uniform(n: usize, t_each: u64, m_each: u64) -> Result<ComputationGraph> {
    if n < 2 {
        return Err(Error::Degenerate(format!("uniform chain needs n >= 2, got {n}")));
    }
    let mut b = Builder::new(format!("uniform{n}"));
    let (t, m) = (t_each as i64, m_each as i64);
    for i in 0..n {
        let inputs: Vec<usize> = if i == 0 { vec![] } else { vec![i - 1] };
        b.add(format!("n{i}"), t / 2, t - t / 2, m, 0, 0, &inputs);
        if m > 0 {
            b.save(i, format!("n{i}:out"), m, i);
        }
    }
    b.finish()
}

fn jitter(rng: &mut ChaCha8Rng, spread: f64) -> f64 {
    1.0 + rng.gen_range(-spread..=spread)
}

/// Splits a node time into forward and backward parts (1:2).
fn split(time: f64) -> (i64, i64) {
    let t = time.round().max(1.0) as i64;
    let f = (t / 3).max(1);
    (f, t - f)
}

pub fn gen_transformer_like(layers: usize, seed: u64) -> Result<ComputationGraph> {
    gen_transformer_like_scaled(layers, seed, Scale::default())
}

pub fn gen_transformer_like_scaled(layers: usize, seed: u64, scale: Scale) -> Result<ComputationGraph> {
    if layers < 2 {
        return Err(Error::Degenerate(format!("need at least 2 layers, got {layers}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(format!("transformer{layers}-s{seed}"));
    // relative cost, parameter MiB
    let op = |b: &mut Builder, rng: &mut ChaCha8Rng, id: String, cost: f64, params: f64, inputs: &[usize]| {
        let (t_f, t_b) = split(cost * scale.time_us * jitter(rng, 0.15));
        let m_a = (cost * scale.mem_bytes * jitter(rng, 0.15)).round() as i64;
        let m_p = (params * scale.mem_bytes).round() as i64;
        b.add(id, t_f, t_b, m_a, m_p, 0, inputs)
    };
    let embed = op(&mut b, &mut rng, "embed".into(), 8.0, 8.0, &[]);
    let mut x = embed;
    for l in 0..layers {
        let id = |s: &str| format!("l{l}.{s}");
        let ln1 = op(&mut b, &mut rng, id("ln1"), 4.0, 0.0, &[x]);
        let qkv = op(&mut b, &mut rng, id("qkv"), 12.0, 3.0, &[ln1]);
        let scores = op(&mut b, &mut rng, id("scores"), 24.0, 0.0, &[qkv]);
        let softmax = op(&mut b, &mut rng, id("softmax"), 12.0, 0.0, &[scores]);
        let ctx = op(&mut b, &mut rng, id("ctx"), 8.0, 0.0, &[softmax, qkv]);
        let proj = op(&mut b, &mut rng, id("proj"), 8.0, 1.0, &[ctx]);
        let add1 = op(&mut b, &mut rng, id("add1"), 4.0, 0.0, &[proj, x]);
        let ln2 = op(&mut b, &mut rng, id("ln2"), 4.0, 0.0, &[add1]);
        let fc1 = op(&mut b, &mut rng, id("fc1"), 13.0, 4.0, &[ln2]);
        let gelu = op(&mut b, &mut rng, id("gelu"), 13.0, 0.0, &[fc1]);
        let fc2 = op(&mut b, &mut rng, id("fc2"), 8.0, 4.0, &[gelu]);
        x = op(&mut b, &mut rng, id("add2"), 4.0, 0.0, &[fc2, add1]);
    }
    // tied output projection reads the embedding table's output again
    op(&mut b, &mut rng, "head".into(), 10.0, 0.0, &[x, embed]);
    b.save_outputs();
    b.finish()
}

pub fn gen_cnn_like(layers: usize, seed: u64) -> Result<ComputationGraph> {
    gen_cnn_like_scaled(layers, seed, Scale::default())
}

pub fn gen_cnn_like_scaled(layers: usize, seed: u64, scale: Scale) -> Result<ComputationGraph> {
    if layers < 2 {
        return Err(Error::Degenerate(format!("need at least 2 layers, got {layers}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(format!("cnn{layers}-s{seed}"));
    let stages = 4.0f64;
    let mut x: Option<usize> = None;
    let mut resident = 0i64;
    for l in 0..layers {
        // spatial size shrinks and channel count grows with depth
        let level = (l as f64 * stages / layers as f64).floor();
        let spatial = 0.5f64.powf(level);
        let channels = 2.0f64.powf(level);
        let inputs: Vec<usize> = x.into_iter().collect();
        let conv_t = 30.0 * channels.sqrt() * jitter(&mut rng, 0.2);
        let (t_f, t_b) = split(conv_t * scale.time_us);
        let m = |k: f64, rng: &mut ChaCha8Rng| (k * spatial * scale.mem_bytes * jitter(rng, 0.15)).round() as i64;
        let conv_m = m(2.0, &mut rng);
        let m_p = (0.25 * channels * scale.mem_bytes).round() as i64;
        let conv = b.add(format!("l{l}.conv"), t_f, t_b, conv_m, m_p, 0, &inputs);
        let bn_m = m(24.0, &mut rng);
        let (t_f, t_b) = split(1.5 * scale.time_us * jitter(&mut rng, 0.2));
        let bn = b.add(format!("l{l}.bn"), t_f, t_b, bn_m, 0, 0, &[conv]);
        let relu_m = m(24.0, &mut rng);
        let (t_f, t_b) = split(1.0 * scale.time_us * jitter(&mut rng, 0.2));
        let relu = b.add(format!("l{l}.relu"), t_f, t_b, relu_m, 0, 0, &[bn]);
        resident += conv_m + m_p + bn_m + relu_m;
        x = Some(relu);
        let next_level = ((l + 1) as f64 * stages / layers as f64).floor();
        if next_level > level && l + 1 < layers {
            // pooling frees the full-resolution workspace of this level
            let pool_m = m(2.0, &mut rng);
            let freed = (resident as f64 * 0.3 * jitter(&mut rng, 0.1)) as i64;
            let (t_f, t_b) = split(1.0 * scale.time_us);
            let pool = b.add(format!("l{l}.pool"), t_f, t_b, pool_m, 0, freed, &[relu]);
            resident = resident + pool_m - freed;
            x = Some(pool);
        }
    }
    let (t_f, t_b) = split(5.0 * scale.time_us);
    b.add("fc".into(), t_f, t_b, (0.1 * scale.mem_bytes) as i64, (scale.mem_bytes) as i64, 0, &[x.unwrap()]);
    b.save_outputs();
    b.finish()
}

/// Seven-node chain whose 4-stage memory-balanced partition has stage
/// times 29.104, 90, 150 and 286.275 ms, and whose compute-balanced
/// partition has 129.489, 140, 140 and 145.89 ms, with the first stage
/// needing one 7.401 ms recomputation at 112 MiB per device.
pub fn gen_appendix_a() -> ComputationGraph {
    let times: [i64; 7] = [29_104, 90_000, 10_385, 139_615, 385, 140_000, 145_890];
    let mems: [i64; 7] = [12, 16, 4, 20, 8, 20, 20];
    let mut b = Builder::new("appendix-a");
    for i in 0..7 {
        let t_f = if i == 2 { 7_401 } else { times[i] / 3 };
        let inputs: Vec<usize> = if i == 0 { vec![] } else { vec![i - 1] };
        b.add(format!("block{i}"), t_f, times[i] - t_f, mems[i] * MIB as i64, 0, 0, &inputs);
        let saved = if i == 2 { 4 } else { 1 };
        b.save(i, format!("block{i}:out"), saved * MIB as i64, i);
    }
    b.finish().expect("fixed scenario graph is valid")
}

pub fn generate(kind: GenKind, layers: usize, seed: u64) -> Result<ComputationGraph> {
    match kind {
        GenKind::Uniform => gen_uniform(layers, 1000, MIB),
        GenKind::Transformer => gen_transformer_like(layers, seed),
        GenKind::Cnn => gen_cnn_like(layers, seed),
    }
}

/// Pearson correlation of node time `t_f + t_b` against `m_a`.
pub fn time_memory_correlation(g: &ComputationGraph) -> f64 {
    let n = g.len() as f64;
    let xs: Vec<f64> = g.nodes.iter().map(|v| v.time() as f64).collect();
    let ys: Vec<f64> = g.nodes.iter().map(|v| v.m_a as f64).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}
