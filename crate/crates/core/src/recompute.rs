//! Per-layer recomputation plans.
//!
//! The multi-hop planner grows a relevant set one segment per hop: the first
//! pick follows query attention, later picks follow the mean attention that
//! already-relevant segments pay to the remaining candidates. The baseline
//! planners (prefix, full reuse, fixed edge positions, KV deviation) live here
//! too so that every strategy is compared through the same executor.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::cache::ReuseStats;
use crate::error::{Error, Result};
use crate::transformer::{
    self, AttentionSummary, CachedKv, Divergence, FinalState, LayerPlanner, Model,
    SelectiveOutput,
};

/// Segment indices (layout positions) recomputed at each layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecomputePlan {
    layers: Vec<BTreeSet<usize>>,
}

impl RecomputePlan {
    pub fn new(layers: Vec<BTreeSet<usize>>) -> Self {
        Self { layers }
    }

    pub fn full(num_layers: usize, num_segments: usize) -> Self {
        Self::new(vec![(0..num_segments).collect(); num_layers])
    }

    pub fn empty(num_layers: usize) -> Self {
        Self::new(vec![BTreeSet::new(); num_layers])
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> Option<&BTreeSet<usize>> {
        self.layers.get(layer)
    }

    pub fn layers(&self) -> &[BTreeSet<usize>] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(BTreeSet::len).collect()
    }

    pub fn contains(&self, layer: usize, segment: usize) -> bool {
        self.layers[layer].contains(&segment)
    }

    /// Checks segment bounds and `plan[l+1] ⊆ plan[l]`.
    pub fn validate(&self, num_segments: usize) -> Result<()> {
        for (l, set) in self.layers.iter().enumerate() {
            if let Some(&m) = set.iter().next_back() {
                if m >= num_segments {
                    return Err(Error::Plan(format!(
                        "layer {l} references unknown segment {m}"
                    )));
                }
            }
            if l > 0 && !set.is_subset(&self.layers[l - 1]) {
                return Err(Error::Plan(format!(
                    "layer {l} plan is not a subset of layer {}",
                    l - 1
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer recomputation ratios: `r[0] = 1`, geometric decay after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSchedule {
    pub r: Vec<f64>,
    pub r_avg: f64,
}

impl RatioSchedule {
    pub fn all_ones(num_layers: usize) -> Self {
        Self {
            r: vec![1.0; num_layers],
            r_avg: 1.0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.r.len()
    }

    /// Segments allowed at `layer` out of `num_segments`; never below one.
    pub fn budget(&self, layer: usize, num_segments: usize) -> usize {
        let raw = (self.r[layer] * num_segments as f64 - 1e-9).ceil();
        (raw.max(1.0) as usize).min(num_segments)
    }
}

fn geometric_mean_ratio(num_layers: usize, gamma: f64) -> f64 {
    (0..num_layers).map(|l| gamma.powi(l as i32)).sum::<f64>() / num_layers as f64
}

/// Bisection on the decay factor so the layer mean hits `r_avg`.
pub fn ratio_schedule(num_layers: usize, r_avg: f64) -> Result<RatioSchedule> {
    if num_layers == 0 {
        return Err(Error::Config("ratio schedule needs at least one layer".into()));
    }
    if num_layers == 1 {
        return Ok(RatioSchedule { r: vec![1.0], r_avg });
    }
    let lo_feasible = 1.0 / num_layers as f64;
    if !(lo_feasible - 1e-12..=1.0 + 1e-12).contains(&r_avg) || r_avg.is_nan() {
        return Err(Error::Config(format!(
            "r_avg {r_avg} infeasible for {num_layers} layers (needs {lo_feasible:.4}..=1)"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if geometric_mean_ratio(num_layers, mid) < r_avg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma = 0.5 * (lo + hi);
    let r = (0..num_layers)
        .map(|l| if l == 0 { 1.0 } else { gamma.powi(l as i32) })
        .collect();
    Ok(RatioSchedule { r, r_avg })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub scores: Vec<f32>,
    /// In selection order.
    pub relevant: Vec<usize>,
    pub hop: usize,
}

impl ImportanceState {
    pub fn relevant_set(&self) -> BTreeSet<usize> {
        self.relevant.iter().copied().collect()
    }
}

pub fn init_importance(attn: &AttentionSummary) -> ImportanceState {
    ImportanceState {
        scores: attn.query_to_segment.clone(),
        relevant: Vec::new(),
        hop: 0,
    }
}

/// Highest score first, ties by ascending index.
fn best(candidates: impl Iterator<Item = usize>, scores: &[f32]) -> Option<usize> {
    candidates.fold(None, |acc: Option<usize>, s| match acc {
        Some(b) if scores[b] >= scores[s] => Some(b),
        _ => Some(s),
    })
}

pub fn propagate_hop(state: &mut ImportanceState, attn: &AttentionSummary, budget: usize) {
    let all: BTreeSet<usize> = (0..attn.num_segments()).collect();
    propagate_hop_among(state, attn, budget, &all);
}

/// One propagation hop restricted to `candidates`.
pub fn propagate_hop_among(
    state: &mut ImportanceState,
    attn: &AttentionSummary,
    budget: usize,
    candidates: &BTreeSet<usize>,
) {
    state.hop += 1;
    if state.relevant.len() >= budget {
        return;
    }
    let selected = state.relevant_set();
    let unselected = || candidates.iter().copied().filter(|s| !selected.contains(s));
    if state.relevant.is_empty() {
        if let Some(top) = best(unselected(), &state.scores) {
            state.relevant.push(top);
        }
        return;
    }
    let n = state.relevant.len() as f32;
    for s in unselected() {
        let total: f32 = state
            .relevant
            .iter()
            .map(|&m| attn.segment_to_segment[m][s])
            .sum();
        state.scores[s] = total / n;
    }
    if let Some(top) = best(unselected(), &state.scores) {
        if state.scores[top] > 0.0 {
            state.relevant.push(top);
        }
    }
}

pub fn converge(attn: &AttentionSummary, budget: usize) -> ImportanceState {
    let all: BTreeSet<usize> = (0..attn.num_segments()).collect();
    converge_among(attn, budget, &all)
}

/// Hops until the set stops growing, reaches `budget`, or `S` hops elapse.
pub fn converge_among(
    attn: &AttentionSummary,
    budget: usize,
    candidates: &BTreeSet<usize>,
) -> ImportanceState {
    let mut state = init_importance(attn);
    let limit = attn.num_segments();
    loop {
        let before = state.relevant.len();
        propagate_hop_among(&mut state, attn, budget, candidates);
        let grew = state.relevant.len() > before;
        if !grew || state.relevant.len() >= budget || state.hop >= limit {
            return state;
        }
    }
}

/// Adaptive planner: all segments at layer 0, then the converged relevant set
/// of the previous layer's attention, restricted to the previous plan.
pub struct KeepPlanner<'a> {
    schedule: &'a RatioSchedule,
    multi_hop: bool,
    hops: Vec<usize>,
}

impl<'a> KeepPlanner<'a> {
    pub fn new(schedule: &'a RatioSchedule) -> Self {
        Self {
            schedule,
            multi_hop: true,
            hops: Vec::new(),
        }
    }

    /// Ablation: rank candidates by query attention only, no propagation.
    pub fn without_propagation(schedule: &'a RatioSchedule) -> Self {
        Self {
            multi_hop: false,
            ..Self::new(schedule)
        }
    }

    /// Hops spent per planned layer (layers 1..).
    pub fn hops(&self) -> &[usize] {
        &self.hops
    }
}

impl LayerPlanner for KeepPlanner<'_> {
    fn first_layer(&mut self, num_segments: usize) -> Result<BTreeSet<usize>> {
        Ok((0..num_segments).collect())
    }

    fn next_layer(
        &mut self,
        computed_layer: usize,
        attn: &AttentionSummary,
        current: &BTreeSet<usize>,
    ) -> Result<BTreeSet<usize>> {
        let layer = computed_layer + 1;
        let s = attn.num_segments();
        let budget = self.schedule.budget(layer, s);
        if budget >= current.len() {
            self.hops.push(0);
            return Ok(current.clone());
        }
        if !self.multi_hop {
            self.hops.push(0);
            let mut ranked: Vec<usize> = current.iter().copied().collect();
            ranked.sort_by(|&a, &b| {
                attn.query_to_segment[b]
                    .total_cmp(&attn.query_to_segment[a])
                    .then(a.cmp(&b))
            });
            return Ok(ranked.into_iter().take(budget).collect());
        }
        let state = converge_among(attn, budget, current);
        self.hops.push(state.hop);
        Ok(state.relevant_set())
    }
}

fn check_schedule(model: &Model, schedule: &RatioSchedule) -> Result<()> {
    if schedule.num_layers() != model.num_layers() {
        return Err(Error::Config(format!(
            "schedule has {} layers, model has {}",
            schedule.num_layers(),
            model.num_layers()
        )));
    }
    Ok(())
}

/// Runs the adaptive planner interleaved with execution and returns both.
pub fn execute_keep(
    model: &Model,
    layout: &[Vec<u32>],
    cached: &CachedKv,
    query: &[u32],
    schedule: &RatioSchedule,
    multi_hop: bool,
) -> Result<SelectiveOutput> {
    check_schedule(model, schedule)?;
    let mut planner = if multi_hop {
        KeepPlanner::new(schedule)
    } else {
        KeepPlanner::without_propagation(schedule)
    };
    transformer::run_selective(model, layout, cached, query, &mut planner)
}

pub fn plan_keep(
    model: &Model,
    layout: &[Vec<u32>],
    cached: &CachedKv,
    query: &[u32],
    schedule: &RatioSchedule,
) -> Result<RecomputePlan> {
    Ok(execute_keep(model, layout, cached, query, schedule, true)?.plan)
}

/// Reuse everything before the first invalid segment, recompute the rest.
pub fn plan_prefix(
    num_layers: usize,
    num_segments: usize,
    first_invalid_segment: Option<usize>,
) -> RecomputePlan {
    let set: BTreeSet<usize> = match first_invalid_segment {
        Some(first) => (first.min(num_segments)..num_segments).collect(),
        None => BTreeSet::new(),
    };
    RecomputePlan::new(vec![set; num_layers])
}

pub fn plan_full_reuse(num_layers: usize) -> RecomputePlan {
    RecomputePlan::empty(num_layers)
}

/// Segments touching the first or last `k_edge_tokens` tokens of their block,
/// nearest-to-edge first, clipped to each layer's budget.
///
/// `segment_lens[s]` is segment `s`'s token count; `blocks` are contiguous
/// ranges of segment indices covering the layout.
pub fn plan_fixed_position(
    segment_lens: &[usize],
    blocks: &[Range<usize>],
    schedule: &RatioSchedule,
    k_edge_tokens: usize,
) -> Result<RecomputePlan> {
    let s = segment_lens.len();
    let mut covered = vec![false; s];
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for block in blocks {
        if block.end > s || block.start > block.end {
            return Err(Error::Plan(format!("block {block:?} outside layout of {s}")));
        }
        let block_tokens: usize = segment_lens[block.clone()].iter().sum();
        let mut offset = 0;
        for seg in block.clone() {
            if std::mem::replace(&mut covered[seg], true) {
                return Err(Error::Plan(format!("segment {seg} in two blocks")));
            }
            let (first, last) = (offset, offset + segment_lens[seg]);
            offset = last;
            if k_edge_tokens == 0 || first == last {
                continue;
            }
            // distance of the segment's nearest token to either block edge
            let from_start = first;
            let from_end = block_tokens - last;
            let dist = from_start.min(from_end);
            if dist < k_edge_tokens {
                ranked.push((dist, seg));
            }
        }
    }
    ranked.sort();
    let layers = (0..schedule.num_layers())
        .map(|l| {
            let budget = schedule.budget(l, s);
            ranked.iter().take(budget).map(|&(_, seg)| seg).collect()
        })
        .collect();
    Ok(RecomputePlan::new(layers))
}

/// Mean per-token L2 distance between the KV each segment gets after a full
/// first layer and its cached KV, measured at layer 1.
///
/// Layer-0 KV depends on token ids only, so the first layer where fresh and
/// cached KV can differ is layer 1. Single-layer models score zero.
pub fn kv_deviation(
    model: &Model,
    layout: &[Vec<u32>],
    cached: &CachedKv,
    query: &[u32],
) -> Result<Vec<f64>> {
    if model.num_layers() < 2 {
        return Ok(vec![0.0; layout.len()]);
    }
    let fresh = transformer::fresh_kv_at(model, layout, query, 1)?;
    let mut start = 0;
    let mut out = Vec::with_capacity(layout.len());
    for (seg, tokens) in layout.iter().enumerate() {
        let end = start + tokens.len();
        let cached_layer = cached[seg]
            .as_ref()
            .and_then(|kv| kv.get(1))
            .ok_or_else(|| Error::CacheMiss(format!("segment {seg} has no cached KV at layer 1")))?;
        let mut total = 0.0;
        for (i, t) in (start..end).enumerate() {
            let dk = crate::tensor::l2_distance(fresh.keys.row(t), cached_layer.keys.row(i));
            let dv = crate::tensor::l2_distance(fresh.values.row(t), cached_layer.values.row(i));
            total += (dk * dk + dv * dv).sqrt();
        }
        out.push(total / tokens.len().max(1) as f64);
        start = end;
    }
    Ok(out)
}

/// Layer 0 recomputes all; later layers take the top segments of a fixed
/// deviation ranking, so plans nest as budgets shrink.
pub fn plan_deviation(
    model: &Model,
    layout: &[Vec<u32>],
    cached: &CachedKv,
    query: &[u32],
    schedule: &RatioSchedule,
) -> Result<RecomputePlan> {
    check_schedule(model, schedule)?;
    let dev = kv_deviation(model, layout, cached, query)?;
    Ok(plan_from_ranking(&dev, schedule))
}

pub(crate) fn plan_from_ranking(scores: &[f64], schedule: &RatioSchedule) -> RecomputePlan {
    let s = scores.len();
    let mut ranked: Vec<usize> = (0..s).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let layers = (0..schedule.num_layers())
        .map(|l| {
            if l == 0 {
                (0..s).collect()
            } else {
                ranked.iter().take(schedule.budget(l, s)).copied().collect()
            }
        })
        .collect();
    RecomputePlan::new(layers)
}

/// Memory token-layer accounting of one plan: a token at a layer is either
/// recomputed or served from cache.
pub fn plan_stats(plan: &RecomputePlan, segment_lens: &[usize]) -> ReuseStats {
    let total: usize = segment_lens.iter().sum();
    let mut stats = ReuseStats::default();
    for set in plan.layers() {
        let recomputed: usize = set.iter().map(|&s| segment_lens[s]).sum();
        stats.tokens_recomputed += recomputed as u64;
        stats.tokens_reused += (total - recomputed) as u64;
    }
    stats
}

#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub final_state: FinalState,
    pub divergence: Divergence,
    pub plan: RecomputePlan,
    pub stats: ReuseStats,
}

/// Executes `plan` and scores it against a fresh full-prefill oracle.
pub fn run_strategy(
    model: &Model,
    layout: &[Vec<u32>],
    cached: &CachedKv,
    query: &[u32],
    plan: &RecomputePlan,
) -> Result<StrategyResult> {
    let out = transformer::selective_prefill(model, layout, cached, plan, query)?;
    let oracle = transformer::full_prefill(model, layout, query)?;
    let divergence = transformer::divergence(&out.final_state, &oracle.final_state)?;
    let lens: Vec<usize> = layout.iter().map(Vec::len).collect();
    Ok(StrategyResult {
        stats: plan_stats(&out.plan, &lens),
        final_state: out.final_state,
        divergence,
        plan: out.plan,
    })
}
