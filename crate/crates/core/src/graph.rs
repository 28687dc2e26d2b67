//! Profiled computation graph.
//!
//! A graph is a set of fine-grained nodes, each carrying forward/backward
//! compute times and the memory it allocates, owns and releases. Nodes are
//! kept in canonical order: depth ascending, then profiled forward start,
//! then id. Every downstream algorithm indexes nodes by that order.

use std::collections::{HashMap, VecDeque};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance;
use crate::error::{Error, Result};
use crate::units::transfer_time_us;

pub const PROFILE_SCHEMA: u64 = 1;

/// A tensor kept alive from its producer's forward until a later backward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRef {
    pub id: String,
    pub size: u64,
    /// Canonical index of the producing node.
    pub producer: usize,
    /// Canonical index of the node whose backward reads this tensor last.
    pub last_backward_access: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfiledNode {
    pub id: String,
    pub depth: u32,
    pub fwd_start: u64,
    pub t_f: u64,
    pub t_b: u64,
    /// Activation bytes produced.
    pub m_a: u64,
    /// Parameter and optimizer-state bytes owned.
    pub m_p: u64,
    /// Bytes released once this node has run.
    pub m_d: u64,
    /// Tensors this node produces that stay resident for backward.
    pub saved: Vec<TensorRef>,
    /// Canonical indices of data-flow successors.
    pub consumers: Vec<usize>,
}

impl ProfiledNode {
    pub fn time(&self) -> u64 {
        self.t_f + self.t_b
    }
}

/// Immutable, validated graph in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputationGraph {
    pub name: String,
    pub nodes: Vec<ProfiledNode>,
    pub total_param_bytes: u64,
    preds: Vec<Vec<usize>>,
    ids: HashMap<String, usize>,
}

// ---------------------------------------------------------------------------
// Profile file schema

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub schema: u64,
    pub name: String,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: String,
    pub depth: i64,
    pub fwd_start_us: i64,
    pub t_f_us: i64,
    pub t_b_us: i64,
    pub m_a_bytes: i64,
    pub m_p_bytes: i64,
    pub m_d_bytes: i64,
    #[serde(default)]
    pub consumers: Vec<String>,
    #[serde(default)]
    pub saved: Vec<SavedRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedRecord {
    pub tensor_id: String,
    pub size_bytes: i64,
    pub last_backward_access: String,
}

fn non_negative(node: &str, field: &str, v: i64) -> Result<u64> {
    u64::try_from(v).map_err(|_| Error::validation(node, format!("{field} is negative ({v})")))
}

impl ComputationGraph {
    /// Validates a parsed profile and puts it in canonical order.
    pub fn from_profile(profile: ProfileFile) -> Result<Self> {
        if profile.schema != PROFILE_SCHEMA {
            return Err(Error::Schema {
                found: profile.schema,
                expected: PROFILE_SCHEMA,
            });
        }
        let recs = profile.nodes;
        let mut file_idx: HashMap<&str, usize> = HashMap::with_capacity(recs.len());
        for (i, r) in recs.iter().enumerate() {
            if file_idx.insert(r.id.as_str(), i).is_some() {
                return Err(Error::validation(&r.id, "duplicate node id"));
            }
        }

        struct Scalars {
            depth: u32,
            fwd_start: u64,
            t_f: u64,
            t_b: u64,
            m_a: u64,
            m_p: u64,
            m_d: u64,
        }
        let mut scalars = Vec::with_capacity(recs.len());
        for r in &recs {
            let depth = non_negative(&r.id, "depth", r.depth)?;
            scalars.push(Scalars {
                depth: u32::try_from(depth)
                    .map_err(|_| Error::validation(&r.id, "depth out of range"))?,
                fwd_start: non_negative(&r.id, "fwd_start_us", r.fwd_start_us)?,
                t_f: non_negative(&r.id, "t_f_us", r.t_f_us)?,
                t_b: non_negative(&r.id, "t_b_us", r.t_b_us)?,
                m_a: non_negative(&r.id, "m_a_bytes", r.m_a_bytes)?,
                m_p: non_negative(&r.id, "m_p_bytes", r.m_p_bytes)?,
                m_d: non_negative(&r.id, "m_d_bytes", r.m_d_bytes)?,
            });
        }

        // Successors by file index.
        let mut succ: Vec<Vec<usize>> = Vec::with_capacity(recs.len());
        for r in &recs {
            let mut s = Vec::with_capacity(r.consumers.len());
            for c in &r.consumers {
                match file_idx.get(c.as_str()) {
                    Some(&j) => s.push(j),
                    None => {
                        return Err(Error::validation(
                            &r.id,
                            format!("consumer `{c}` does not exist"),
                        ))
                    }
                }
            }
            s.sort_unstable();
            s.dedup();
            succ.push(s);
        }

        // Kahn's algorithm; anything left over sits on a cycle.
        let mut indeg = vec![0usize; recs.len()];
        for s in &succ {
            for &j in s {
                indeg[j] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..recs.len()).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop_front() {
            seen += 1;
            for &j in &succ[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        if seen != recs.len() {
            let on_cycle = (0..recs.len()).find(|&i| indeg[i] > 0).unwrap();
            return Err(Error::validation(
                &recs[on_cycle].id,
                "consumer relation contains a cycle through this node",
            ));
        }
        for (i, s) in succ.iter().enumerate() {
            for &j in s {
                if scalars[j].depth <= scalars[i].depth {
                    return Err(Error::validation(
                        &recs[j].id,
                        format!(
                            "depth {} is not greater than the depth {} of its producer `{}`",
                            scalars[j].depth, scalars[i].depth, recs[i].id
                        ),
                    ));
                }
            }
        }

        let mut order: Vec<usize> = (0..recs.len()).collect();
        order.sort_by(|&a, &b| {
            (scalars[a].depth, scalars[a].fwd_start, recs[a].id.as_str()).cmp(&(
                scalars[b].depth,
                scalars[b].fwd_start,
                recs[b].id.as_str(),
            ))
        });
        let mut canon = vec![0usize; recs.len()];
        for (ci, &fi) in order.iter().enumerate() {
            canon[fi] = ci;
        }

        let mut nodes = Vec::with_capacity(recs.len());
        for &fi in &order {
            let r = &recs[fi];
            let s = &scalars[fi];
            let me = canon[fi];
            let mut saved = Vec::with_capacity(r.saved.len());
            for t in &r.saved {
                if t.size_bytes <= 0 {
                    return Err(Error::validation(
                        &r.id,
                        format!("saved tensor `{}` must have a positive size", t.tensor_id),
                    ));
                }
                let lba = match file_idx.get(t.last_backward_access.as_str()) {
                    Some(&j) => canon[j],
                    None => {
                        return Err(Error::validation(
                            &r.id,
                            format!(
                                "saved tensor `{}` refers to unknown node `{}`",
                                t.tensor_id, t.last_backward_access
                            ),
                        ))
                    }
                };
                if lba < me {
                    return Err(Error::validation(
                        &r.id,
                        format!(
                            "saved tensor `{}` is last read by `{}`, which precedes its producer",
                            t.tensor_id, t.last_backward_access
                        ),
                    ));
                }
                saved.push(TensorRef {
                    id: t.tensor_id.clone(),
                    size: t.size_bytes as u64,
                    producer: me,
                    last_backward_access: lba,
                });
            }
            let mut consumers: Vec<usize> = succ[fi].iter().map(|&j| canon[j]).collect();
            consumers.sort_unstable();
            nodes.push(ProfiledNode {
                id: r.id.clone(),
                depth: s.depth,
                fwd_start: s.fwd_start,
                t_f: s.t_f,
                t_b: s.t_b,
                m_a: s.m_a,
                m_p: s.m_p,
                m_d: s.m_d,
                saved,
                consumers,
            });
        }

        let mut tensor_ids = HashMap::new();
        for n in &nodes {
            for t in &n.saved {
                if tensor_ids.insert(t.id.clone(), ()).is_some() {
                    return Err(Error::validation(
                        &n.id,
                        format!("tensor id `{}` appears more than once", t.id),
                    ));
                }
            }
        }

        Ok(Self::assemble(profile.name, nodes))
    }

    fn assemble(name: String, nodes: Vec<ProfiledNode>) -> Self {
        let mut preds = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            for &c in &n.consumers {
                preds[c].push(i);
            }
        }
        let ids = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        let total_param_bytes = nodes.iter().map(|n| n.m_p).sum();
        ComputationGraph {
            name,
            nodes,
            total_param_bytes,
            preds,
            ids,
        }
    }

    pub fn to_profile(&self) -> ProfileFile {
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id.clone(),
                depth: n.depth as i64,
                fwd_start_us: n.fwd_start as i64,
                t_f_us: n.t_f as i64,
                t_b_us: n.t_b as i64,
                m_a_bytes: n.m_a as i64,
                m_p_bytes: n.m_p as i64,
                m_d_bytes: n.m_d as i64,
                consumers: n
                    .consumers
                    .iter()
                    .map(|&c| self.nodes[c].id.clone())
                    .collect(),
                saved: n
                    .saved
                    .iter()
                    .map(|t| SavedRecord {
                        tensor_id: t.id.clone(),
                        size_bytes: t.size as i64,
                        last_backward_access: self.nodes[t.last_backward_access].id.clone(),
                    })
                    .collect(),
            })
            .collect();
        ProfileFile {
            schema: PROFILE_SCHEMA,
            name: self.name.clone(),
            nodes,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_profile(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_profile()).expect("profile serializes")
    }

    /// Hex SHA-256 of the canonical profile serialization.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_profile()).expect("profile serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.get(id).copied()
    }

    /// Canonical indices of data-flow predecessors.
    pub fn preds(&self, i: usize) -> &[usize] {
        &self.preds[i]
    }

    /// All saved tensors in producer order.
    pub fn tensors(&self) -> impl Iterator<Item = &TensorRef> {
        self.nodes.iter().flat_map(|n| n.saved.iter())
    }

    pub fn time(&self, range: Range<usize>) -> u64 {
        self.nodes[range].iter().map(ProfiledNode::time).sum()
    }

    pub fn fwd_time(&self, range: Range<usize>) -> u64 {
        self.nodes[range].iter().map(|n| n.t_f).sum()
    }

    pub fn bwd_time(&self, range: Range<usize>) -> u64 {
        self.nodes[range].iter().map(|n| n.t_b).sum()
    }

    pub fn param_bytes(&self, range: Range<usize>) -> u64 {
        self.nodes[range].iter().map(|n| n.m_p).sum()
    }

    /// Memory level right after each node's allocation, before its release,
    /// with accumulation restarted at `range.start`.
    pub fn alloc_levels(&self, range: Range<usize>, include_params: bool) -> Vec<i64> {
        let mut cur: i64 = 0;
        let mut out = Vec::with_capacity(range.len());
        for n in &self.nodes[range] {
            cur += n.m_a as i64;
            if include_params {
                cur += n.m_p as i64;
            }
            out.push(cur);
            cur -= n.m_d as i64;
        }
        out
    }

    /// Per-micro-batch peak of a node range, accumulating from zero.
    pub fn peak(&self, range: Range<usize>) -> u64 {
        self.alloc_levels(range, true)
            .into_iter()
            .fold(0i64, i64::max)
            .max(0) as u64
    }

    /// Producers at or before `pos` that feed some node after it.
    pub fn crossing_producers(&self, pos: usize) -> Vec<usize> {
        (0..=pos.min(self.len().saturating_sub(1)))
            .filter(|&u| self.nodes[u].consumers.last().is_some_and(|&c| c > pos))
            .collect()
    }

    /// Activation bytes that cross a cut placed after `pos`.
    pub fn crossing_bytes(&self, pos: usize) -> u64 {
        self.crossing_producers(pos)
            .into_iter()
            .map(|u| self.nodes[u].m_a)
            .sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_profile(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_profile(self, path)
    }
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<ComputationGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ComputationGraph::from_json(&text)
}

pub fn save_profile(g: &ComputationGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, g.to_json() + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Series and statistics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeriesPoint {
    pub cum_time_us: u64,
    /// Live bytes after this node's release.
    pub cur_mem: i64,
    /// Running maximum of the post-allocation level.
    pub peak_mem: i64,
}

/// Prefix series over the whole graph: add `m_a + m_p`, record the peak,
/// then subtract `m_d`.
pub fn cumulative_series(g: &ComputationGraph) -> Vec<SeriesPoint> {
    let mut out = Vec::with_capacity(g.len());
    let (mut t, mut cur, mut peak) = (0u64, 0i64, 0i64);
    for n in &g.nodes {
        t += n.time();
        cur += (n.m_a + n.m_p) as i64;
        peak = peak.max(cur);
        cur -= n.m_d as i64;
        out.push(SeriesPoint {
            cum_time_us: t,
            cur_mem: cur,
            peak_mem: peak,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Quantiles {
    pub p50: i64,
    pub p80: i64,
    pub p90: i64,
    pub p99: i64,
    pub max: i64,
}

impl Quantiles {
    /// Nearest-rank quantiles. Empty input yields zeros.
    pub fn of(values: impl IntoIterator<Item = i64>) -> Self {
        let mut v: Vec<i64> = values.into_iter().collect();
        if v.is_empty() {
            return Quantiles { p50: 0, p80: 0, p90: 0, p99: 0, max: 0 };
        }
        v.sort_unstable();
        let rank = |q: f64| {
            let k = (q * v.len() as f64).ceil() as usize;
            v[k.clamp(1, v.len()) - 1]
        };
        Quantiles {
            p50: rank(0.50),
            p80: rank(0.80),
            p90: rank(0.90),
            p99: rank(0.99),
            max: *v.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryCdf {
    /// Activation bytes per node.
    pub activation: Quantiles,
    /// `m_a + m_p - m_d` per node; releases count negative.
    pub consumed: Quantiles,
}

pub fn memory_cdf(g: &ComputationGraph) -> MemoryCdf {
    MemoryCdf {
        activation: Quantiles::of(g.nodes.iter().map(|n| n.m_a as i64)),
        consumed: Quantiles::of(
            g.nodes
                .iter()
                .map(|n| n.m_a as i64 + n.m_p as i64 - n.m_d as i64),
        ),
    }
}

// ---------------------------------------------------------------------------
// Partition-range premises

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionThresholds {
    /// Live memory may not fall below this fraction of its running peak.
    pub dip_tolerance: f64,
    /// Largest allowed ratio between bucket sums of swap-candidate bytes.
    pub spread_factor: f64,
}

impl Default for ConditionThresholds {
    fn default() -> Self {
        ConditionThresholds {
            dip_tolerance: 0.9,
            spread_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDetails {
    /// Lowest observed `cur_mem / peak_mem` ratio (1.0 when never below).
    pub min_live_to_peak: f64,
    /// Node id where that lowest ratio occurs.
    pub deepest_dip_at: Option<String>,
    /// Shortest stage of the compute-balanced partition, in microseconds.
    pub min_stage_time_us: u64,
    /// Longest single-cut transfer time, in microseconds.
    pub max_cut_comm_us: u64,
    pub worst_cut: Option<usize>,
    /// Swap-candidate bytes per order bucket.
    pub bucket_bytes: Vec<u64>,
    /// The even-distribution check is a heuristic, not an exact premise test.
    pub spread_is_heuristic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremConditionReport {
    pub compute_monotone: bool,
    pub memory_monotone: bool,
    pub comm_dominated: bool,
    pub memopt_evenly_distributed: bool,
    pub details: ConditionDetails,
}

impl TheoremConditionReport {
    pub fn all(&self) -> bool {
        self.compute_monotone
            && self.memory_monotone
            && self.comm_dominated
            && self.memopt_evenly_distributed
    }
}

pub fn check_theorem_conditions(
    g: &ComputationGraph,
    stages: usize,
    bandwidth_bps: u64,
) -> Result<TheoremConditionReport> {
    check_theorem_conditions_with(g, stages, bandwidth_bps, ConditionThresholds::default())
}

pub fn check_theorem_conditions_with(
    g: &ComputationGraph,
    stages: usize,
    bandwidth_bps: u64,
    th: ConditionThresholds,
) -> Result<TheoremConditionReport> {
    if stages < 2 {
        return Err(Error::Degenerate(format!("need at least 2 stages, got {stages}")));
    }
    let series = cumulative_series(g);

    let compute_monotone = series
        .windows(2)
        .all(|w| w[1].cum_time_us >= w[0].cum_time_us);

    let mut memory_monotone = series.windows(2).all(|w| w[1].peak_mem >= w[0].peak_mem);
    let mut min_ratio = 1.0f64;
    let mut dip_at = None;
    for (i, p) in series.iter().enumerate() {
        if p.peak_mem <= 0 {
            continue;
        }
        let ratio = p.cur_mem as f64 / p.peak_mem as f64;
        if ratio < min_ratio {
            min_ratio = ratio;
            dip_at = Some(g.nodes[i].id.clone());
        }
        if (p.cur_mem as f64) < th.dip_tolerance * p.peak_mem as f64 {
            memory_monotone = false;
        }
    }

    let cb = balance::compute_balanced(g, 0..g.len(), &vec![1.0; stages])?;
    let min_stage_time = cb
        .stage_ranges(g.len())
        .map(|r| g.time(r))
        .min()
        .unwrap_or(0);
    let mut max_comm = 0u64;
    let mut worst_cut = None;
    for pos in 0..g.len().saturating_sub(1) {
        let t = transfer_time_us(g.crossing_bytes(pos), bandwidth_bps);
        if t > max_comm || worst_cut.is_none() {
            max_comm = t;
            worst_cut = Some(pos);
        }
    }
    let comm_dominated = max_comm < min_stage_time;

    let buckets = g.len().clamp(1, 10);
    let mut bucket_bytes = vec![0u64; buckets];
    for t in g.tensors() {
        bucket_bytes[t.producer * buckets / g.len()] += t.size;
    }
    let hi = *bucket_bytes.iter().max().unwrap_or(&0);
    let lo = *bucket_bytes.iter().min().unwrap_or(&0);
    let memopt_evenly_distributed = hi == 0 || (lo > 0 && (hi as f64) < th.spread_factor * lo as f64);

    Ok(TheoremConditionReport {
        compute_monotone,
        memory_monotone,
        comm_dominated,
        memopt_evenly_distributed,
        details: ConditionDetails {
            min_live_to_peak: min_ratio,
            deepest_dip_at: dip_at,
            min_stage_time_us: min_stage_time,
            max_cut_comm_us: max_comm,
            worst_cut,
            bucket_bytes,
            spread_is_heuristic: true,
        },
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::units::MIB;

    pub fn node(id: &str, depth: i64, t: i64, m_a: i64, consumers: &[&str]) -> NodeRecord {
        NodeRecord {
            id: id.to_string(),
            depth,
            fwd_start_us: depth * 10,
            t_f_us: t / 2,
            t_b_us: t - t / 2,
            m_a_bytes: m_a,
            m_p_bytes: 0,
            m_d_bytes: 0,
            consumers: consumers.iter().map(|s| s.to_string()).collect(),
            saved: vec![],
        }
    }

    pub fn chain(name: &str, times: &[i64], mems: &[i64]) -> ComputationGraph {
        let n = times.len();
        let ids: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let nodes = (0..n)
            .map(|i| {
                let next: Vec<&str> = if i + 1 < n { vec![ids[i + 1].as_str()] } else { vec![] };
                node(&ids[i], i as i64, times[i], mems[i], &next)
            })
            .collect();
        ComputationGraph::from_profile(ProfileFile {
            schema: PROFILE_SCHEMA,
            name: name.into(),
            nodes,
        })
        .unwrap()
    }

    /// 8-node chain, 1 ms and 1 MiB per node, nothing saved.
    pub fn uni8() -> ComputationGraph {
        chain("uni8", &[1000; 8], &[MIB as i64; 8])
    }

    /// 4-node chain with times 1..4 ms and activations 4..1 MiB.
    pub fn tri4() -> ComputationGraph {
        let m = MIB as i64;
        chain("tri4", &[1000, 2000, 3000, 4000], &[4 * m, 3 * m, 2 * m, m])
    }
}
