//! Per-stage swap and recomputation planning.
//!
//! Candidates come from the saved-tensor lists. Swaps are costed with
//! FreeTime: the slack between a tensor's forward completion and its
//! backward access once both transfers are placed on the stage's copy
//! channels. Recomputation is ranked by memory saved per second of
//! re-executed forward work. A tensor only relieves the stage peak if it is
//! resident at the peak instant, so savings are always measured against the
//! recomputed allocation series.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::graph::{ComputationGraph, TensorRef};
use crate::units::transfer_time_us;

/// Forward/backward timing of one stage executed in isolation.
#[derive(Debug, Clone)]
pub struct StageTimeline {
    start: usize,
    fwd_end: Vec<u64>,
    bwd_start: Vec<u64>,
    pub total: u64,
}

impl StageTimeline {
    pub fn new(g: &ComputationGraph, range: Range<usize>) -> Self {
        let nodes = &g.nodes[range.clone()];
        let mut fwd_end = Vec::with_capacity(nodes.len());
        let mut t = 0;
        for n in nodes {
            t += n.t_f;
            fwd_end.push(t);
        }
        let mut bwd_start = vec![0; nodes.len()];
        for (i, n) in nodes.iter().enumerate().rev() {
            bwd_start[i] = t;
            t += n.t_b;
        }
        StageTimeline {
            start: range.start,
            fwd_end,
            bwd_start,
            total: t,
        }
    }

    /// Forward completion of a producer; tensors received from an earlier
    /// stage are available at time zero.
    pub fn forward_completion(&self, producer: usize) -> u64 {
        producer
            .checked_sub(self.start)
            .map_or(0, |i| self.fwd_end[i])
    }

    pub fn backward_access(&self, node: usize) -> u64 {
        self.bwd_start[node - self.start]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapCandidate {
    pub tensor: TensorRef,
    pub out_time: u64,
    pub in_time: u64,
    pub forward_completion: u64,
    pub backward_access: u64,
    /// Standalone slack; negative means the round trip cannot hide.
    pub free_time: i64,
    pub overhead_if_chosen: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecomputeCandidate {
    pub tensor: TensorRef,
    pub recompute_time: u64,
    /// Bytes per second of re-executed forward time.
    pub msps: f64,
    /// Nodes re-executed to regenerate the tensor.
    pub chain: Vec<usize>,
    /// Resident tensors' producers the chain starts from.
    pub boundary: Vec<usize>,
}

// Serialized with the plan file (`TensorRef` is not serde).
impl Serialize for TensorRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("TensorRef", 4)?;
        st.serialize_field("id", &self.id)?;
        st.serialize_field("size_bytes", &self.size)?;
        st.serialize_field("producer", &self.producer)?;
        st.serialize_field("last_backward_access", &self.last_backward_access)?;
        st.end()
    }
}

pub fn collect_candidates(
    g: &ComputationGraph,
    range: Range<usize>,
    bandwidth_bps: u64,
) -> (Vec<SwapCandidate>, Vec<RecomputeCandidate>) {
    let timeline = StageTimeline::new(g, range.clone());
    let mut swaps = Vec::new();
    for t in g.tensors() {
        if !range.contains(&t.last_backward_access) {
            continue;
        }
        let out_time = transfer_time_us(t.size, bandwidth_bps);
        let in_time = out_time;
        let fc = timeline.forward_completion(t.producer);
        let ba = timeline.backward_access(t.last_backward_access);
        let free_time = ba as i64 - fc as i64 - (out_time + in_time) as i64;
        swaps.push(SwapCandidate {
            tensor: t.clone(),
            out_time,
            in_time,
            forward_completion: fc,
            backward_access: ba,
            free_time,
            overhead_if_chosen: (-free_time).max(0) as u64,
        });
    }

    let retained = |i: usize| !g.nodes[i].saved.is_empty();
    let mut recomputes = Vec::new();
    for t in g.tensors() {
        if !range.contains(&t.producer) {
            continue;
        }
        let mut chain = BTreeSet::new();
        let mut boundary = BTreeSet::new();
        let mut stack = vec![t.producer];
        while let Some(i) = stack.pop() {
            if !chain.insert(i) {
                continue;
            }
            for &p in g.preds(i) {
                if !range.contains(&p) {
                    // stage input: received and held
                } else if retained(p) {
                    boundary.insert(p);
                } else {
                    stack.push(p);
                }
            }
        }
        let recompute_time = chain.iter().map(|&i| g.nodes[i].t_f).sum::<u64>().max(1);
        recomputes.push(RecomputeCandidate {
            tensor: t.clone(),
            recompute_time,
            msps: t.size as f64 * 1e6 / recompute_time as f64,
            chain: chain.into_iter().collect(),
            boundary: boundary.into_iter().collect(),
        });
    }
    (swaps, recomputes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MemOptAction {
    Swap {
        tensor: String,
        bytes: u64,
        /// Slack with every chosen transfer placed on the copy channels.
        free_time_us: i64,
        overhead_us: u64,
    },
    Recompute {
        tensor: String,
        bytes: u64,
        recompute_us: u64,
    },
}

impl MemOptAction {
    pub fn tensor(&self) -> &str {
        match self {
            MemOptAction::Swap { tensor, .. } | MemOptAction::Recompute { tensor, .. } => tensor,
        }
    }

    pub fn bytes(&self) -> u64 {
        match self {
            MemOptAction::Swap { bytes, .. } | MemOptAction::Recompute { bytes, .. } => *bytes,
        }
    }

    pub fn overhead(&self) -> u64 {
        match self {
            MemOptAction::Swap { overhead_us, .. } => *overhead_us,
            MemOptAction::Recompute { recompute_us, .. } => *recompute_us,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemOptPlan {
    pub actions: Vec<MemOptAction>,
    /// Sum of action tensor sizes.
    pub bytes_saved: u64,
    /// Reduction of the per-micro-batch peak actually achieved.
    pub effective_saved: u64,
    /// Added stage time (T^moo).
    pub added_time: u64,
}

impl MemOptPlan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct StageRequest<'g> {
    pub graph: &'g ComputationGraph,
    pub range: Range<usize>,
    pub replica_weight: u64,
    pub capacity: u64,
    pub bandwidth_bps: u64,
}

/// Allocation series of a stage with some tensors removed.
#[derive(Clone)]
struct PeakTracker {
    start: usize,
    levels: Vec<i64>,
}

impl PeakTracker {
    fn new(g: &ComputationGraph, range: Range<usize>) -> Self {
        PeakTracker {
            start: range.start,
            levels: g.alloc_levels(range, true),
        }
    }

    fn remove(&mut self, t: &TensorRef) {
        if let Some(off) = t.producer.checked_sub(self.start) {
            for v in &mut self.levels[off..] {
                *v -= t.size as i64;
            }
        }
    }

    fn peak(&self) -> u64 {
        self.levels.iter().copied().fold(0, i64::max).max(0) as u64
    }

    /// Peak if a removed tensor were kept after all.
    fn peak_restoring(&self, t: &TensorRef) -> u64 {
        let off = t.producer.saturating_sub(self.start).min(self.levels.len());
        let size = if t.producer < self.start { 0 } else { t.size as i64 };
        let head = self.levels[..off].iter().copied().fold(0, i64::max);
        let tail = self.levels[off..].iter().map(|v| v + size).fold(0, i64::max);
        head.max(tail) as u64
    }

    /// Peak reduction from additionally removing `t`.
    fn marginal(&self, t: &TensorRef, prefix_max: &[i64], suffix_max: &[i64]) -> u64 {
        let Some(off) = t.producer.checked_sub(self.start) else {
            return 0;
        };
        let before = if off == 0 { 0 } else { prefix_max[off - 1] };
        let after = suffix_max[off] - t.size as i64;
        let now = self.peak() as i64;
        (now - before.max(after).max(0)).max(0) as u64
    }

    fn scans(&self) -> (Vec<i64>, Vec<i64>) {
        let n = self.levels.len();
        let mut pre = vec![0; n];
        let mut acc = i64::MIN;
        for i in 0..n {
            acc = acc.max(self.levels[i]);
            pre[i] = acc.max(0);
        }
        let mut suf = vec![0; n];
        let mut acc = i64::MIN;
        for i in (0..n).rev() {
            acc = acc.max(self.levels[i]);
            suf[i] = acc;
        }
        (pre, suf)
    }
}

/// Peak of a stage's allocation series after dropping the named tensors.
pub fn peak_without(
    g: &ComputationGraph,
    range: Range<usize>,
    removed: &[&str],
    include_params: bool,
) -> u64 {
    let mut tracker = PeakTracker {
        start: range.start,
        levels: g.alloc_levels(range.clone(), include_params),
    };
    for t in g.tensors().filter(|t| removed.contains(&t.id.as_str())) {
        if range.contains(&t.producer) {
            tracker.remove(t);
        }
    }
    tracker.peak()
}

/// Places swap transfers on the stage's copy channels: swap-outs in forward
/// order as early as possible, swap-ins as late as possible before their
/// backward access. Returns per-swap slack in input order.
fn channel_slack(swaps: &[&SwapCandidate]) -> Vec<i64> {
    let mut order: Vec<usize> = (0..swaps.len()).collect();
    order.sort_by_key(|&i| (swaps[i].forward_completion, swaps[i].tensor.producer, i));
    let mut out_end = vec![0i64; swaps.len()];
    let mut chan = 0i64;
    for &i in &order {
        let start = chan.max(swaps[i].forward_completion as i64);
        chan = start + swaps[i].out_time as i64;
        out_end[i] = chan;
    }
    order.sort_by_key(|&i| {
        (
            std::cmp::Reverse(swaps[i].backward_access),
            std::cmp::Reverse(swaps[i].tensor.producer),
            i,
        )
    });
    let mut in_start = vec![0i64; swaps.len()];
    let mut chan = i64::MAX;
    for &i in &order {
        let end = chan.min(swaps[i].backward_access as i64);
        chan = end - swaps[i].in_time as i64;
        in_start[i] = chan;
    }
    (0..swaps.len()).map(|i| in_start[i] - out_end[i]).collect()
}

fn swap_cost(swaps: &[&SwapCandidate]) -> u64 {
    Channels::new(swaps).cost_with(None)
}

fn out_key(c: &SwapCandidate, i: usize) -> (u64, usize, usize) {
    (c.forward_completion, c.tensor.producer, i)
}

fn in_key(c: &SwapCandidate, i: usize) -> (std::cmp::Reverse<u64>, std::cmp::Reverse<usize>, usize) {
    (std::cmp::Reverse(c.backward_access), std::cmp::Reverse(c.tensor.producer), i)
}

/// Channel placement of a fixed swap set, kept sorted so that the cost of
/// adding one more swap is a linear merge. Same placement as
/// [`channel_slack`] with the extra swap appended last.
struct Channels<'a, 'c> {
    swaps: &'a [&'c SwapCandidate],
    by_out: Vec<usize>,
    by_in: Vec<usize>,
    out_end: Vec<i64>,
    in_start: Vec<i64>,
}

impl<'a, 'c> Channels<'a, 'c> {
    fn new(swaps: &'a [&'c SwapCandidate]) -> Self {
        let mut by_out: Vec<usize> = (0..swaps.len()).collect();
        by_out.sort_by_key(|&i| out_key(swaps[i], i));
        let mut by_in: Vec<usize> = (0..swaps.len()).collect();
        by_in.sort_by_key(|&i| in_key(swaps[i], i));
        Channels {
            swaps,
            by_out,
            by_in,
            out_end: vec![0; swaps.len() + 1],
            in_start: vec![0; swaps.len() + 1],
        }
    }

    /// Total overhead of the set plus `extra`.
    fn cost_with(&mut self, extra: Option<&SwapCandidate>) -> u64 {
        let swaps = self.swaps;
        let n = swaps.len();
        let get = |i: usize| if i < n { swaps[i] } else { extra.unwrap() };
        let total = n + extra.is_some() as usize;
        let mut chan = 0i64;
        let (mut j, mut pending) = (0, extra.is_some());
        for _ in 0..total {
            let i = if pending && (j == n || out_key(extra.unwrap(), n) < out_key(self.swaps[self.by_out[j]], self.by_out[j])) {
                pending = false;
                n
            } else {
                j += 1;
                self.by_out[j - 1]
            };
            let c = get(i);
            chan = chan.max(c.forward_completion as i64) + c.out_time as i64;
            self.out_end[i] = chan;
        }
        let mut chan = i64::MAX;
        let (mut j, mut pending) = (0, extra.is_some());
        for _ in 0..total {
            let i = if pending && (j == n || in_key(extra.unwrap(), n) < in_key(self.swaps[self.by_in[j]], self.by_in[j])) {
                pending = false;
                n
            } else {
                j += 1;
                self.by_in[j - 1]
            };
            let c = get(i);
            chan = chan.min(c.backward_access as i64) - c.in_time as i64;
            self.in_start[i] = chan;
        }
        (0..total).map(|i| (self.out_end[i] - self.in_start[i]).max(0) as u64).sum()
    }
}

fn fits(weight: u64, peak: u64, capacity: u64) -> bool {
    weight as u128 * peak as u128 <= capacity as u128
}

/// `a / b < c / d` for nonnegative integers, with `x / 0` treated as +inf.
fn ratio_less(a: u64, b: u64, c: u64, d: u64) -> bool {
    match (b, d) {
        (0, _) => false,
        (_, 0) => true,
        _ => (a as u128) * (d as u128) < (c as u128) * (b as u128),
    }
}

fn assemble(
    swaps: &[&SwapCandidate],
    recomputes: &[&RecomputeCandidate],
    order: &[(bool, usize)],
    micro_peak: u64,
    final_peak: u64,
) -> MemOptPlan {
    let slack = channel_slack(swaps);
    let mut actions = Vec::with_capacity(order.len());
    for &(is_swap, i) in order {
        if is_swap {
            let c = swaps[i];
            actions.push(MemOptAction::Swap {
                tensor: c.tensor.id.clone(),
                bytes: c.tensor.size,
                free_time_us: slack[i],
                overhead_us: (-slack[i]).max(0) as u64,
            });
        } else {
            let c = recomputes[i];
            actions.push(MemOptAction::Recompute {
                tensor: c.tensor.id.clone(),
                bytes: c.tensor.size,
                recompute_us: c.recompute_time,
            });
        }
    }
    MemOptPlan {
        bytes_saved: actions.iter().map(MemOptAction::bytes).sum(),
        effective_saved: micro_peak - final_peak,
        added_time: actions.iter().map(MemOptAction::overhead).sum(),
        actions,
    }
}

/// Actions picked so far and the allocation series they leave behind.
#[derive(Clone)]
struct Selection<'c> {
    tracker: PeakTracker,
    swaps: Vec<&'c SwapCandidate>,
    recs: Vec<&'c RecomputeCandidate>,
    /// Pick order as (is_swap, index into `swaps` or `recs`).
    order: Vec<(bool, usize)>,
    /// Candidate-list index of each pick, aligned with `order`.
    ids: Vec<(bool, usize)>,
    /// Picked tensors, by position in the stage's tensor list.
    taken: Vec<bool>,
    /// Picks as bits: swaps first, then recomputes.
    bits: Vec<u64>,
}

#[derive(Clone, Copy)]
struct Move {
    swap: bool,
    idx: usize,
    cost: u64,
    gain: u64,
}

type Key = Vec<u64>;

/// A finished selection with its (overhead, action count).
type Scored<'c> = (u64, usize, Selection<'c>);

fn better<'c>(a: Option<Scored<'c>>, b: Option<Scored<'c>>) -> Option<Scored<'c>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(if (b.0, b.1) < (a.0, a.1) { b } else { a }),
        (a, b) => a.or(b),
    }
}

impl<'c> Selection<'c> {
    fn rec_time(&self) -> u64 {
        self.recs.iter().map(|c| c.recompute_time).sum()
    }

    fn cost(&self) -> u64 {
        swap_cost(&self.swaps) + self.rec_time()
    }

    /// One level of recomputation only: a chain may not start from a
    /// recomputed tensor, nor may a chain's start be recomputed later.
    fn nests(&self, c: &RecomputeCandidate) -> bool {
        self.recs.iter().any(|r| {
            c.boundary.contains(&r.tensor.producer) || r.boundary.contains(&c.tensor.producer)
        })
    }

    fn pick(&self, k: usize) -> &'c TensorRef {
        match self.order[k] {
            (true, i) => &self.swaps[i].tensor,
            (false, i) => &self.recs[i].tensor,
        }
    }

    fn swap_cost_without(&self, i: usize) -> u64 {
        let rest: Vec<&SwapCandidate> = (self.swaps.iter().enumerate())
            .filter(|&(j, _)| j != i)
            .map(|(_, c)| *c)
            .collect();
        swap_cost(&rest)
    }
}

/// Greedy search state for one stage. Completions are memoized by the set
/// of picks, since different greedy paths keep meeting in the same states.
struct Search<'c, F: Fn(u64) -> bool> {
    swaps: &'c [SwapCandidate],
    recs: &'c [RecomputeCandidate],
    base: PeakTracker,
    fits_peak: F,
    /// Tensor position of each swap and recompute candidate.
    swap_tensor: Vec<usize>,
    rec_tensor: Vec<usize>,
    tensors: usize,
    completed: RefCell<HashMap<(Key, Key), (Option<Scored<'c>>, Key)>>,
    settled: RefCell<HashMap<Key, Scored<'c>>>,
}

/// Candidate moves rolled out per pilot step.
const PILOT_WIDTH: usize = 6;

impl<'c, F: Fn(u64) -> bool> Search<'c, F> {
    fn new(swaps: &'c [SwapCandidate], recs: &'c [RecomputeCandidate], base: PeakTracker, fits_peak: F) -> Self {
        let mut ids: Vec<&str> = swaps.iter().map(|c| c.tensor.id.as_str()).collect();
        ids.extend(recs.iter().map(|c| c.tensor.id.as_str()));
        ids.sort_unstable();
        ids.dedup();
        let pos = |id: &str| ids.binary_search(&id).unwrap();
        Search {
            swap_tensor: swaps.iter().map(|c| pos(&c.tensor.id)).collect(),
            rec_tensor: recs.iter().map(|c| pos(&c.tensor.id)).collect(),
            tensors: ids.len(),
            swaps,
            recs,
            base,
            fits_peak,
            completed: RefCell::new(HashMap::new()),
            settled: RefCell::new(HashMap::new()),
        }
    }

    fn empty(&self) -> Selection<'c> {
        Selection {
            tracker: self.base.clone(),
            swaps: Vec::new(),
            recs: Vec::new(),
            order: Vec::new(),
            ids: Vec::new(),
            taken: vec![false; self.tensors],
            bits: vec![0; (self.swaps.len() + self.recs.len()).div_ceil(64)],
        }
    }

    fn push(&self, sel: &mut Selection<'c>, swap: bool, idx: usize) {
        if swap {
            let c = &self.swaps[idx];
            sel.tracker.remove(&c.tensor);
            sel.order.push((true, sel.swaps.len()));
            sel.swaps.push(c);
            sel.taken[self.swap_tensor[idx]] = true;
        } else {
            let c = &self.recs[idx];
            sel.tracker.remove(&c.tensor);
            sel.order.push((false, sel.recs.len()));
            sel.recs.push(c);
            sel.taken[self.rec_tensor[idx]] = true;
        }
        self.mark(&mut sel.bits, swap, idx);
        sel.ids.push((swap, idx));
    }

    fn mark(&self, key: &mut Key, swap: bool, idx: usize) {
        let bit = if swap { idx } else { self.swaps.len() + idx };
        key[bit / 64] |= 1 << (bit % 64);
    }

    fn banned_key(&self, banned: &[(bool, usize)]) -> Key {
        let mut key = vec![0u64; (self.swaps.len() + self.recs.len()).div_ceil(64)];
        for &(swap, idx) in banned {
            self.mark(&mut key, swap, idx);
        }
        key
    }

    fn fits(&self, sel: &Selection) -> bool {
        (self.fits_peak)(sel.tracker.peak())
    }

    /// Every action still available, with its exact marginal cost and gain.
    fn moves(&self, sel: &Selection<'c>, banned: &[(bool, usize)]) -> Vec<Move> {
        let (pre, suf) = sel.tracker.scans();
        let mut channels = Channels::new(&sel.swaps);
        let current = channels.cost_with(None);
        let mut out = Vec::new();
        for (idx, c) in self.swaps.iter().enumerate() {
            if sel.taken[self.swap_tensor[idx]] || banned.contains(&(true, idx)) {
                continue;
            }
            let gain = sel.tracker.marginal(&c.tensor, &pre, &suf);
            if gain > 0 {
                let cost = channels.cost_with(Some(c)) - current;
                out.push(Move { swap: true, idx, cost, gain });
            }
        }
        for (idx, c) in self.recs.iter().enumerate() {
            if sel.taken[self.rec_tensor[idx]] || sel.nests(c) || banned.contains(&(false, idx)) {
                continue;
            }
            let gain = sel.tracker.marginal(&c.tensor, &pre, &suf);
            if gain > 0 {
                out.push(Move { swap: false, idx, cost: c.recompute_time, gain });
            }
        }
        out
    }

    /// Same selection minus the `k`-th pick.
    fn without(&self, sel: &Selection<'c>, k: usize) -> Selection<'c> {
        let mut out = self.empty();
        for (j, &(swap, idx)) in sel.ids.iter().enumerate() {
            if j != k {
                self.push(&mut out, swap, idx);
            }
        }
        out
    }

    /// Drops picks that later ones made redundant, most expensive first.
    fn prune(&self, mut sel: Selection<'c>) -> Selection<'c> {
        loop {
            let cost = sel.cost();
            let rec_time = sel.rec_time();
            let mut best: Option<(u64, usize)> = None;
            for k in (0..sel.order.len()).rev() {
                if !(self.fits_peak)(sel.tracker.peak_restoring(sel.pick(k))) {
                    continue;
                }
                let after = match sel.order[k] {
                    (true, i) => sel.swap_cost_without(i) + rec_time,
                    (false, i) => cost - sel.recs[i].recompute_time,
                };
                let saved = cost - after;
                if best.is_none_or(|(s, _)| saved > s) {
                    best = Some((saved, k));
                }
            }
            match best {
                Some((_, k)) => sel = self.without(&sel, k),
                None => return sel,
            }
        }
    }

    /// Switches single picks between swapping and recomputing the same
    /// tensor while that lowers the total. The peak is unchanged.
    fn flip(&self, mut sel: Selection<'c>) -> Selection<'c> {
        'again: loop {
            let cost = sel.cost();
            let rec_time = sel.rec_time();
            for k in 0..sel.order.len() {
                let (is_swap, i) = sel.order[k];
                let id = &sel.pick(k).id;
                let replacement = if is_swap {
                    let Some(r) = self.recs.iter().position(|r| &r.tensor.id == id) else { continue };
                    let after = sel.swap_cost_without(i) + rec_time + self.recs[r].recompute_time;
                    if sel.nests(&self.recs[r]) || after >= cost {
                        continue;
                    }
                    (false, r)
                } else {
                    let Some(c) = self.swaps.iter().position(|c| &c.tensor.id == id) else { continue };
                    let after = Channels::new(&sel.swaps).cost_with(Some(&self.swaps[c])) + rec_time
                        - sel.recs[i].recompute_time;
                    if after >= cost {
                        continue;
                    }
                    (true, c)
                };
                let mut next = self.without(&sel, k);
                self.push(&mut next, replacement.0, replacement.1);
                sel = next;
                continue 'again;
            }
            return sel;
        }
    }

    fn settle(&self, sel: Selection<'c>) -> Scored<'c> {
        let key = sel.bits.clone();
        if let Some(hit) = self.settled.borrow().get(&key) {
            return hit.clone();
        }
        let sel = self.flip(self.prune(sel));
        let out = (sel.cost(), sel.order.len(), sel);
        self.settled.borrow_mut().insert(key, out.clone());
        out
    }

    /// Plain greedy from `sel`: cheapest overhead per byte until the stage
    /// fits. Whenever one action could finish the job, the cheapest such
    /// completion is kept as an alternative to the ratio rule's result.
    fn complete(&self, mut sel: Selection<'c>, banned: &[(bool, usize)]) -> Option<Scored<'c>> {
        let banned_key = self.banned_key(banned);
        let free_key = self.banned_key(&[]);
        let disjoint = |a: &Key, b: &Key| a.iter().zip(b).all(|(x, y)| x & y == 0);
        // (state key, best finish from here, moves this step relied on)
        let mut path: Vec<((Key, Key), Option<Scored<'c>>, Key)> = Vec::new();
        let mut tail = None;
        let mut tail_used = free_key.clone();
        loop {
            let key = (sel.bits.clone(), banned_key.clone());
            {
                let cache = self.completed.borrow();
                // an unrestricted run that never relied on a banned move
                // takes the same path
                let hit = cache.get(&key).or_else(|| {
                    cache
                        .get(&(sel.bits.clone(), free_key.clone()))
                        .filter(|(_, used)| disjoint(used, &banned_key))
                });
                if let Some((best, used)) = hit {
                    (tail, tail_used) = (best.clone(), used.clone());
                    break;
                }
            }
            let peak = sel.tracker.peak();
            if (self.fits_peak)(peak) {
                path.push((key, Some(self.settle(sel)), free_key.clone()));
                break;
            }
            let moves = self.moves(&sel, banned);
            let mut used = free_key.clone();
            let closer = moves
                .iter()
                .filter(|m| (self.fits_peak)(peak - m.gain))
                .min_by_key(|m| (m.cost, !m.swap, m.idx));
            let local = closer.map(|m| {
                self.mark(&mut used, m.swap, m.idx);
                let mut done = sel.clone();
                self.push(&mut done, m.swap, m.idx);
                self.settle(done)
            });
            // ties between the two kinds go to swapping
            let pick = moves.iter().copied().reduce(|best, m| {
                let better = ratio_less(m.cost, m.gain, best.cost, best.gain)
                    || (m.swap && !best.swap && !ratio_less(best.cost, best.gain, m.cost, m.gain));
                if better { m } else { best }
            });
            if let Some(m) = pick {
                self.mark(&mut used, m.swap, m.idx);
            }
            path.push((key, local, used));
            match pick {
                Some(m) => self.push(&mut sel, m.swap, m.idx),
                None => break,
            }
        }
        let mut cache = self.completed.borrow_mut();
        for (key, local, used) in path.into_iter().rev() {
            tail = better(local, tail);
            for (t, u) in tail_used.iter_mut().zip(&used) {
                *t |= u;
            }
            cache.insert(key, (tail.clone(), tail_used.clone()));
        }
        tail
    }

    /// Pilot search: at each step, complete the plain greedy from each of
    /// the best few moves and commit to the move whose completion is
    /// cheapest.
    fn pilot(&self, mut sel: Selection<'c>, banned: &[(bool, usize)]) -> Option<Scored<'c>> {
        let mut found = None;
        loop {
            if self.fits(&sel) {
                return better(found, Some(self.settle(sel)));
            }
            let mut step: Option<(u64, usize, Move)> = None;
            for m in ranked(self.moves(&sel, banned)).into_iter().take(PILOT_WIDTH) {
                let mut trial = sel.clone();
                self.push(&mut trial, m.swap, m.idx);
                let Some(done) = self.complete(trial, banned) else { continue };
                if step.is_none_or(|(c, n, _)| (done.0, done.1) < (c, n)) {
                    step = Some((done.0, done.1, m));
                }
                found = better(found, Some(done));
            }
            match step {
                Some((_, _, m)) => self.push(&mut sel, m.swap, m.idx),
                None => return found,
            }
        }
    }
}

/// Moves a ratio-greedy step would consider, best first.
fn ranked(mut moves: Vec<Move>) -> Vec<Move> {
    moves.sort_by(|a, b| {
        let (x, y) = (a.cost as u128 * b.gain as u128, b.cost as u128 * a.gain as u128);
        x.cmp(&y).then(b.swap.cmp(&a.swap)).then(a.idx.cmp(&b.idx))
    });
    moves
}

/// Memory optimization for one stage. `None` means no combination of
/// candidates brings the scheduled peak under capacity.
///
/// Free swaps go first; the remaining deficit is closed by a pilot search
/// over the cheapest-overhead-per-byte greedy, followed by ruin and
/// recreate on single picks.
pub fn optimize(req: &StageRequest<'_>) -> Option<MemOptPlan> {
    assert!(req.replica_weight >= 1, "replica weight must be at least 1");
    let g = req.graph;
    let base = PeakTracker::new(g, req.range.clone());
    let micro_peak = base.peak();
    let fits_peak = |p: u64| fits(req.replica_weight, p, req.capacity);
    if fits_peak(micro_peak) {
        return Some(MemOptPlan::default());
    }
    let (swaps, recs) = collect_candidates(g, req.range.clone(), req.bandwidth_bps);
    let stage_time = g.time(req.range.clone());
    let search = Search::new(&swaps, &recs, base, fits_peak);
    let empty = search.empty();
    let mut sel = empty.clone();

    // Phase 1: swaps that hide entirely under compute.
    let mut by_slack: Vec<usize> = (0..swaps.len()).filter(|&i| swaps[i].free_time >= 0).collect();
    by_slack.sort_by_key(|&i| (std::cmp::Reverse(swaps[i].free_time), swaps[i].tensor.producer));
    let mut transferred = 0u64;
    for i in by_slack {
        let c = &swaps[i];
        if search.fits(&sel) {
            break;
        }
        let (pre, suf) = sel.tracker.scans();
        if sel.tracker.marginal(&c.tensor, &pre, &suf) == 0 || transferred + c.out_time > stage_time {
            continue;
        }
        if Channels::new(&sel.swaps).cost_with(Some(c)) > 0 {
            continue;
        }
        transferred += c.out_time;
        search.push(&mut sel, true, i);
    }

    // Free swaps can crowd the channels, so also search without them.
    let first = search.pilot(sel, &[]);
    let (mut cost, mut count, mut best) = better(first, search.pilot(empty.clone(), &[]))?;

    // Ruin and recreate: forbid one pick, then refill the rest greedily or
    // search again from scratch.
    'improve: loop {
        for k in 0..best.ids.len() {
            let ban = [best.ids[k]];
            let refill = search.complete(search.without(&best, k), &ban);
            let alt = better(refill, search.pilot(empty.clone(), &ban));
            if let Some(alt) = alt.filter(|a| (a.0, a.1) < (cost, count)) {
                (cost, count, best) = alt;
                continue 'improve;
            }
        }
        break;
    }
    Some(assemble(&best.swaps, &best.recs, &best.order, micro_peak, best.tracker.peak()))
}

/// Largest candidate count the exhaustive search accepts.
pub const EXHAUSTIVE_LIMIT: usize = 12;

/// Minimum-cost action set by full enumeration over the stage's candidate
/// tensors. Returns `None` when there are more than [`EXHAUSTIVE_LIMIT`]
/// tensors with any available action, or when nothing fits.
pub fn optimize_exhaustive(req: &StageRequest<'_>) -> Option<Option<MemOptPlan>> {
    let g = req.graph;
    let base = PeakTracker::new(g, req.range.clone());
    let micro_peak = base.peak();
    if fits(req.replica_weight, micro_peak, req.capacity) {
        return Some(Some(MemOptPlan::default()));
    }
    let (swaps, recomputes) = collect_candidates(g, req.range.clone(), req.bandwidth_bps);
    let mut tensors: Vec<&TensorRef> = swaps
        .iter()
        .map(|c| &c.tensor)
        .chain(recomputes.iter().map(|c| &c.tensor))
        .collect();
    tensors.sort_by(|a, b| (a.producer, &a.id).cmp(&(b.producer, &b.id)));
    tensors.dedup_by(|a, b| a.id == b.id);
    if tensors.len() > EXHAUSTIVE_LIMIT {
        return None;
    }
    let swap_of = |id: &str| swaps.iter().find(|c| c.tensor.id == id);
    let rec_of = |id: &str| recomputes.iter().find(|c| c.tensor.id == id);

    let mut best: Option<(u64, usize, Vec<u8>)> = None;
    let total = 3usize.pow(tensors.len() as u32);
    let mut choice = vec![0u8; tensors.len()];
    'outer: for code in 0..total {
        let mut c = code;
        for slot in choice.iter_mut() {
            *slot = (c % 3) as u8;
            c /= 3;
        }
        let mut sw: Vec<&SwapCandidate> = Vec::new();
        let mut rc: Vec<&RecomputeCandidate> = Vec::new();
        let mut tracker = PeakTracker {
            start: base.start,
            levels: base.levels.clone(),
        };
        for (t, &ch) in tensors.iter().zip(&choice) {
            match ch {
                0 => {}
                1 => match swap_of(&t.id) {
                    Some(s) => sw.push(s),
                    None => continue 'outer,
                },
                _ => match rec_of(&t.id) {
                    Some(r) => rc.push(r),
                    None => continue 'outer,
                },
            }
            if ch != 0 {
                tracker.remove(t);
            }
        }
        let producers: BTreeSet<usize> = rc.iter().map(|r| r.tensor.producer).collect();
        if rc.iter().any(|r| r.boundary.iter().any(|b| producers.contains(b))) {
            continue;
        }
        if !fits(req.replica_weight, tracker.peak(), req.capacity) {
            continue;
        }
        let cost = swap_cost(&sw) + rc.iter().map(|r| r.recompute_time).sum::<u64>();
        let n_actions = sw.len() + rc.len();
        if best
            .as_ref()
            .is_none_or(|(bc, bn, _)| (cost, n_actions) < (*bc, *bn))
        {
            best = Some((cost, n_actions, choice.clone()));
        }
    }

    let Some((_, _, choice)) = best else {
        return Some(None);
    };
    let mut sw = Vec::new();
    let mut rc = Vec::new();
    let mut order = Vec::new();
    let mut tracker = base;
    for (t, &ch) in tensors.iter().zip(&choice) {
        match ch {
            1 => {
                order.push((true, sw.len()));
                sw.push(swap_of(&t.id).unwrap());
                tracker.remove(t);
            }
            2 => {
                order.push((false, rc.len()));
                rc.push(rec_of(&t.id).unwrap());
                tracker.remove(t);
            }
            _ => {}
        }
    }
    Some(Some(assemble(&sw, &rc, &order, micro_peak, tracker.peak())))
}
