//! Trace replay for each caching strategy, per-step reports and comparison
//! tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheManager, KVBlock, KvOwner, ReuseStats, Tier};
use crate::episode::{EpisodeConfig, EpisodeTrace, TraceEvent};
use crate::error::{Error, Result};
use crate::memory::{
    GroupTransition, InvalidatedKv, InvalidationRecord, MemoryStore, RetrievalUnit, SegmentId,
};
use crate::pipeline::{self, Schedule, WorkloadUnit};
use crate::recompute::{self, RatioSchedule, RecomputePlan};
use crate::transformer::{self, Divergence, LayerKV, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Full,
    Prefix,
    FullReuse,
    FixedPos,
    Deviation,
    Keep,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Full,
        Strategy::Prefix,
        Strategy::FullReuse,
        Strategy::FixedPos,
        Strategy::Deviation,
        Strategy::Keep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::Prefix => "prefix",
            Strategy::FullReuse => "full-reuse",
            Strategy::FixedPos => "fixed-pos",
            Strategy::Deviation => "deviation",
            Strategy::Keep => "keep",
        }
    }

    pub fn default_schedule(self) -> Schedule {
        match self {
            Strategy::Full => Schedule::Sequential,
            Strategy::Keep => Schedule::Balanced,
            _ => Schedule::Overlap,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// How cached KV is computed and retrieved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Organization {
    /// Static groups share joint KV and are retrieved whole; dynamic
    /// segments have their own KV.
    StaticDynamic,
    /// Consecutive segment ids form fixed blocks whose KV is computed
    /// jointly; an update invalidates the updated segment and everything
    /// after it in the block.
    FixedBlocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub organization: Option<Organization>,
    pub multi_hop: bool,
    pub schedule: Option<Schedule>,
}

impl StrategySpec {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            organization: None,
            multi_hop: true,
            schedule: None,
        }
    }

    pub fn with_organization(mut self, org: Organization) -> Self {
        self.organization = Some(org);
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn without_multi_hop(mut self) -> Self {
        self.multi_hop = false;
        self
    }

    pub fn organization(&self) -> Organization {
        self.organization.unwrap_or(match self.strategy {
            Strategy::Keep => Organization::StaticDynamic,
            _ => Organization::FixedBlocks,
        })
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule.unwrap_or(self.strategy.default_schedule())
    }

    /// Strategy name plus any non-default options.
    pub fn label(&self) -> String {
        let mut s = self.strategy.name().to_string();
        if let Some(org) = self.organization {
            let default = StrategySpec::new(self.strategy).organization();
            if org != default {
                s.push_str(match org {
                    Organization::StaticDynamic => "+groups",
                    Organization::FixedBlocks => "+blocks",
                });
            }
        }
        if !self.multi_hop && self.strategy == Strategy::Keep {
            s.push_str("-multihop");
        }
        if let Some(sched) = self.schedule {
            if sched != self.strategy.default_schedule() {
                let _ = write!(s, "@{sched}");
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub k: usize,
    pub realized_segments: usize,
    pub ttft_tu: f64,
    pub divergence: Divergence,
    pub plan_sizes: Vec<usize>,
    /// Counter growth since the previous query, including invalidations.
    pub stats: ReuseStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_ttft_tu: f64,
    pub p95_ttft_tu: f64,
    pub mean_div_l2: f64,
    pub mean_div_kl: f64,
    pub reuse_ratio: f64,
    pub invalidated_tokens: u64,
    pub bytes_slow: u64,
    pub mean_realized_segments: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub k: usize,
    pub r_avg: f64,
    pub summary: Summary,
    pub totals: ReuseStats,
    pub steps: Vec<StepReport>,
}

impl StrategyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Nearest-rank percentile of a non-empty sample.
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

fn summarize(steps: &[StepReport], totals: &ReuseStats) -> Summary {
    let n = steps.len().max(1) as f64;
    let ttft: Vec<f64> = steps.iter().map(|s| s.ttft_tu).collect();
    Summary {
        mean_ttft_tu: ttft.iter().sum::<f64>() / n,
        p95_ttft_tu: if ttft.is_empty() { 0.0 } else { percentile(&ttft, 0.95) },
        mean_div_l2: steps.iter().map(|s| s.divergence.l2).sum::<f64>() / n,
        mean_div_kl: steps.iter().map(|s| s.divergence.kl).sum::<f64>() / n,
        reuse_ratio: totals.reuse_ratio(),
        invalidated_tokens: totals.tokens_invalidated,
        bytes_slow: totals.bytes_loaded_slow,
        mean_realized_segments: steps.iter().map(|s| s.realized_segments as f64).sum::<f64>() / n,
    }
}

/// A retrieved unit placed in the prompt layout.
struct Unit {
    owner: KvOwner,
    members: Vec<SegmentId>,
    positions: Range<usize>,
}

struct Runner<'a> {
    config: &'a EpisodeConfig,
    spec: StrategySpec,
    model: &'a Model,
    store: MemoryStore,
    cache: CacheManager,
    schedule: RatioSchedule,
    blocks: Vec<Vec<SegmentId>>,
    block_of: BTreeMap<SegmentId, usize>,
    prefix: Vec<(SegmentId, u64)>,
    k_override: Option<usize>,
}

impl<'a> Runner<'a> {
    fn new(
        trace: &EpisodeTrace,
        spec: StrategySpec,
        config: &'a EpisodeConfig,
        model: &'a Model,
        k_override: Option<usize>,
    ) -> Result<Self> {
        let store = MemoryStore::new(config.store_config(), trace.initial_segments(), 0)?;
        let ids: Vec<SegmentId> = store.segments().map(|s| s.id).collect();
        let blocks: Vec<Vec<SegmentId>> = ids.chunks(config.block_segments).map(<[_]>::to_vec).collect();
        let block_of = blocks
            .iter()
            .enumerate()
            .flat_map(|(b, ms)| ms.iter().map(move |m| (*m, b)))
            .collect();
        let mut runner = Self {
            config,
            spec,
            model,
            store,
            cache: CacheManager::new(config.tier)?,
            schedule: recompute::ratio_schedule(model.num_layers(), config.r_avg)?,
            blocks,
            block_of,
            prefix: Vec::new(),
            k_override,
        };
        runner.warm_up()?;
        Ok(runner)
    }

    fn num_layers(&self) -> usize {
        self.model.num_layers()
    }

    fn uses_blocks(&self) -> bool {
        matches!(
            self.spec.strategy,
            Strategy::FullReuse | Strategy::FixedPos | Strategy::Deviation | Strategy::Keep
        ) && self.spec.organization() == Organization::FixedBlocks
    }

    fn uses_groups(&self) -> bool {
        self.spec.strategy == Strategy::Keep && self.spec.organization() == Organization::StaticDynamic
    }

    fn put_layers(&mut self, owner: KvOwner, version: u64, kv: Vec<LayerKV>) {
        for layer in kv {
            self.cache.put(KVBlock::new(owner, version, layer));
        }
    }

    /// Computes all memory KV before the first step.
    fn warm_up(&mut self) -> Result<()> {
        if self.uses_groups() {
            let ids: Vec<SegmentId> = self.store.segments().map(|s| s.id).collect();
            for id in ids {
                self.refill_segment(id)?;
            }
        } else if self.uses_blocks() {
            for b in 0..self.blocks.len() {
                self.refill_block(b)?;
            }
        }
        Ok(())
    }

    /// Recomputes one segment's standalone KV; returns tokens computed.
    fn refill_segment(&mut self, id: SegmentId) -> Result<usize> {
        let seg = self.store.segment(id).expect("known segment");
        let (version, tokens) = (seg.version, seg.tokens.clone());
        let kv = transformer::segment_prefill(self.model, &tokens)?;
        self.put_layers(KvOwner::Segment(id), version, kv);
        Ok(tokens.len())
    }

    fn refill_group(&mut self, members: &[SegmentId], owner: KvOwner, version: u64) -> Result<usize> {
        let layout: Vec<Vec<u32>> = members
            .iter()
            .map(|m| self.store.segment(*m).expect("known segment").tokens.clone())
            .collect();
        let kv = transformer::full_prefill(self.model, &layout, &[])?.kv;
        self.cache.evict_owner(owner);
        self.put_layers(owner, version, kv);
        Ok(layout.iter().map(Vec::len).sum())
    }

    /// Recomputes a fixed block jointly and stores the members whose KV was
    /// missing. Returns (tokens stored, block tokens).
    fn refill_block(&mut self, b: usize) -> Result<(usize, usize)> {
        let members = self.blocks[b].clone();
        let layout: Vec<Vec<u32>> = members
            .iter()
            .map(|m| self.store.segment(*m).expect("known segment").tokens.clone())
            .collect();
        let kv = transformer::full_prefill(self.model, &layout, &[])?.kv;
        let l = self.num_layers();
        let mut start = 0;
        let mut stored = 0;
        for (m, toks) in members.iter().zip(&layout) {
            let end = start + toks.len();
            let owner = KvOwner::Segment(*m);
            let version = self.cache.current_version(owner).unwrap_or(0);
            if !self.cache.is_resident(owner, version, l) {
                for layer in &kv {
                    self.cache.put(KVBlock::new(owner, version, layer.slice_tokens(start, end)));
                }
                stored += toks.len();
            }
            start = end;
        }
        Ok((stored, start))
    }

    fn on_transitions(&mut self, transitions: Vec<GroupTransition>) -> Result<()> {
        if !self.uses_groups() {
            return Ok(());
        }
        for t in transitions {
            for m in &t.members {
                self.cache.evict_owner(KvOwner::Segment(*m));
            }
            self.refill_group(&t.members, KvOwner::Group(t.group), t.version)?;
        }
        Ok(())
    }

    fn on_update(&mut self, id: SegmentId, tokens: Vec<u32>, step: u64) -> Result<()> {
        let old_len = self
            .store
            .segment(id)
            .ok_or_else(|| Error::Trace(format!("update of unknown segment {}", id.0)))?
            .tokens
            .len();
        let record = self.store.apply_update(id, tokens, step)?;
        let pending = self.store.take_pending_transitions();
        self.on_transitions(pending)?;
        match self.spec.strategy {
            Strategy::Full => {}
            _ if self.uses_groups() => {
                self.cache.invalidate(&record);
            }
            _ if self.uses_blocks() => {
                let b = self.block_of[&id];
                let mut entries = Vec::new();
                for m in self.blocks[b].iter().filter(|m| **m >= id) {
                    let owner = KvOwner::Segment(*m);
                    let tokens = if *m == id {
                        old_len
                    } else {
                        self.store.segment(*m).expect("known").tokens.len()
                    };
                    entries.push(InvalidatedKv {
                        owner,
                        version: self.cache.current_version(owner).unwrap_or(0),
                        tokens,
                    });
                }
                self.cache.invalidate(&InvalidationRecord { entries });
            }
            _ => {
                let owner = KvOwner::Segment(id);
                if let Some(version) = self.cache.current_version(owner) {
                    self.cache.invalidate(&InvalidationRecord {
                        entries: vec![InvalidatedKv {
                            owner,
                            version,
                            tokens: old_len,
                        }],
                    });
                }
            }
        }
        Ok(())
    }

    fn retrieve(&self, embedding: &[f32], k: usize) -> Result<Vec<Unit>> {
        let set = if self.uses_groups() {
            self.store.retrieve(embedding, k)?
        } else {
            self.store.retrieve_segments(embedding, k)?
        };
        let mut units = Vec::new();
        let mut pos = 0;
        for u in set.units {
            let (owner, members) = match u {
                RetrievalUnit::Group { id, members } => (KvOwner::Group(id), members),
                RetrievalUnit::Segment { id } => (KvOwner::Segment(id), vec![id]),
            };
            let n = members.len();
            units.push(Unit {
                owner,
                members,
                positions: pos..pos + n,
            });
            pos += n;
        }
        Ok(units)
    }

    fn version_of(&self, owner: KvOwner) -> u64 {
        match owner {
            KvOwner::Segment(id) if self.uses_groups() => self.store.segment(id).expect("known").version,
            KvOwner::Group(g) => self.store.group(g).expect("known").version,
            KvOwner::Segment(_) => self.cache.current_version(owner).unwrap_or(0),
        }
    }

    /// Refills missing KV of retrieved units; returns per-layer compute time.
    fn refill_missing(&mut self, units: &[Unit]) -> Result<f64> {
        let cost = self.config.cost;
        let l = self.num_layers();
        let mut tu = 0.0;
        let mut charge = |n: usize, ctx: usize| {
            tu += cost.compute_tu_per_token_per_layer * n as f64
                + cost.attention_tu_per_token_pair * n as f64 * ctx as f64;
        };
        for u in units {
            let version = self.version_of(u.owner);
            if self.cache.is_resident(u.owner, version, l) {
                continue;
            }
            self.cache.record_miss();
            match u.owner {
                KvOwner::Group(_) => {
                    let n = self.refill_group(&u.members, u.owner, version)?;
                    charge(n, n);
                }
                KvOwner::Segment(id) if self.uses_blocks() => {
                    let (n, ctx) = self.refill_block(self.block_of[&id])?;
                    charge(n, ctx);
                }
                KvOwner::Segment(id) => {
                    let n = self.refill_segment(id)?;
                    charge(n, n);
                }
            }
        }
        Ok(tu)
    }

    fn cached_kv(&self, units: &[Unit], layout: &[Vec<u32>], upto: usize) -> Vec<Option<Vec<LayerKV>>> {
        let l = self.num_layers();
        let mut cached = vec![None; layout.len()];
        for u in units {
            if u.positions.start >= upto {
                continue;
            }
            let layers: Option<Vec<&LayerKV>> = (0..l)
                .map(|layer| self.cache.block(u.owner, layer).map(|b| &b.payload))
                .collect();
            let Some(layers) = layers else { continue };
            let mut offset = 0;
            for p in u.positions.clone() {
                let n = layout[p].len();
                cached[p] = Some(layers.iter().map(|kv| kv.slice_tokens(offset, offset + n)).collect());
                offset += n;
            }
        }
        cached
    }

    fn query(&mut self, step: u64, k: usize, embedding: &[f32], query: &[u32]) -> Result<StepReport> {
        let k = self.k_override.unwrap_or(k);
        let before = self.cache.snapshot_stats();
        let units = self.retrieve(embedding, k)?;
        let layout: Vec<Vec<u32>> = units
            .iter()
            .flat_map(|u| u.members.iter())
            .map(|m| self.store.segment(*m).expect("known").tokens.clone())
            .collect();
        let lens: Vec<usize> = layout.iter().map(Vec::len).collect();
        let num_layers = self.num_layers();
        let model = self.model;

        let refill_tu = match self.spec.strategy {
            Strategy::Full | Strategy::Prefix => 0.0,
            _ => self.refill_missing(&units)?,
        };

        let (plan, divergence) = match self.spec.strategy {
            Strategy::Full => {
                let oracle = transformer::full_prefill(model, &layout, query)?;
                let div = transformer::divergence(&oracle.final_state, &oracle.final_state)?;
                (RecomputePlan::full(num_layers, layout.len()), div)
            }
            Strategy::Prefix => {
                let current: Vec<(SegmentId, u64)> = units
                    .iter()
                    .flat_map(|u| u.members.iter())
                    .map(|m| (*m, self.store.segment(*m).expect("known").version))
                    .collect();
                let first = current
                    .iter()
                    .zip(&self.prefix)
                    .position(|(a, b)| a != b)
                    .or((current.len() > self.prefix.len()).then_some(self.prefix.len()));
                let plan = recompute::plan_prefix(num_layers, layout.len(), first);
                let upto = first.unwrap_or(layout.len());
                let cached = self.cached_kv(&units, &layout, upto);
                let out = transformer::selective_prefill(model, &layout, &cached, &plan, query)?;
                let oracle = transformer::full_prefill(model, &layout, query)?;
                let div = transformer::divergence(&out.final_state, &oracle.final_state)?;
                for u in units.iter().filter(|u| u.positions.start >= upto) {
                    let KvOwner::Segment(id) = u.owner else { unreachable!("prefix uses segments") };
                    let version = self.store.segment(id).expect("known").version;
                    let start: usize = lens[..u.positions.start].iter().sum();
                    let end = start + lens[u.positions.start];
                    let kv = out.merged_kv.iter().map(|l| l.slice_tokens(start, end)).collect();
                    self.cache.evict_owner(u.owner);
                    self.put_layers(u.owner, version, kv);
                }
                self.prefix = current;
                (out.plan, div)
            }
            _ => {
                let cached = self.cached_kv(&units, &layout, layout.len());
                let out = match self.spec.strategy {
                    Strategy::Keep => recompute::execute_keep(
                        model,
                        &layout,
                        &cached,
                        query,
                        &self.schedule,
                        self.spec.multi_hop,
                    )?,
                    s => {
                        let plan = match s {
                            Strategy::FullReuse => recompute::plan_full_reuse(num_layers),
                            Strategy::FixedPos => {
                                let blocks = self.layout_blocks(&units);
                                recompute::plan_fixed_position(
                                    &lens,
                                    &blocks,
                                    &self.schedule,
                                    self.config.k_edge_tokens,
                                )?
                            }
                            _ => recompute::plan_deviation(model, &layout, &cached, query, &self.schedule)?,
                        };
                        transformer::selective_prefill(model, &layout, &cached, &plan, query)?
                    }
                };
                let oracle = transformer::full_prefill(model, &layout, query)?;
                let div = transformer::divergence(&out.final_state, &oracle.final_state)?;
                (out.plan, div)
            }
        };

        self.cache.record_prefill(&recompute::plan_stats(&plan, &lens));

        let bytes_per_token = model.config().kv_bytes_per_token();
        let wunits: Vec<WorkloadUnit> = if self.spec.strategy == Strategy::Full {
            Vec::new()
        } else {
            units
                .iter()
                .enumerate()
                .map(|(i, u)| WorkloadUnit {
                    owner: i,
                    members: u.positions.clone().collect(),
                    bytes_per_layer: lens[u.positions.clone()].iter().sum::<usize>() as u64 * bytes_per_token,
                    slow: (0..num_layers)
                        .map(|l| self.cache.tier_of(u.owner, l) == Some(Tier::Slow))
                        .collect(),
                })
                .collect()
        };
        let mut workload = pipeline::derive_workload(
            &plan,
            &lens,
            &wunits,
            query.len(),
            &self.config.cost,
            &self.config.tier,
            self.spec.strategy == Strategy::Keep,
        )?;
        if refill_tu > 0.0 {
            for l in 0..num_layers {
                workload.add_compute(l, refill_tu);
            }
        }
        for (l, set) in plan.layers().iter().enumerate() {
            for (i, u) in units.iter().enumerate() {
                if wunits.get(i).is_some() && u.positions.clone().any(|p| !set.contains(&p)) {
                    self.cache.load_memory(u.owner, l)?;
                }
            }
        }
        let timeline = pipeline::simulate(&workload, self.spec.schedule())?;
        if let Some(v) = timeline.validate().first() {
            return Err(Error::Plan(format!("step {step}: invalid timeline: {v}")));
        }

        Ok(StepReport {
            step,
            k,
            realized_segments: layout.len(),
            ttft_tu: timeline.makespan_tu,
            divergence,
            plan_sizes: plan.sizes(),
            stats: self.cache.snapshot_stats().since(&before),
        })
    }

    /// Layout ranges sharing a fixed block.
    fn layout_blocks(&self, units: &[Unit]) -> Vec<Range<usize>> {
        let mut out: Vec<Range<usize>> = Vec::new();
        let mut last_block = usize::MAX;
        for u in units {
            let b = match u.owner {
                KvOwner::Segment(id) => self.block_of[&id],
                KvOwner::Group(g) => usize::MAX - 1 - g.0 as usize,
            };
            match out.last_mut() {
                Some(r) if b == last_block => r.end = u.positions.end,
                _ => out.push(u.positions.clone()),
            }
            last_block = b;
        }
        out
    }
}

/// Replays a trace under one strategy.
pub fn run_episode(
    trace: &EpisodeTrace,
    spec: StrategySpec,
    config: &EpisodeConfig,
) -> Result<StrategyReport> {
    run_episode_with(trace, spec, config, None)
}

/// [`run_episode`] with every query's `k` replaced by `k_override`.
pub fn run_episode_with(
    trace: &EpisodeTrace,
    spec: StrategySpec,
    config: &EpisodeConfig,
    k_override: Option<usize>,
) -> Result<StrategyReport> {
    config.validate()?;
    trace.validate()?;
    let model = Model::new(config.model)?;
    let mut runner = Runner::new(trace, spec, config, &model, k_override)?;
    let mut steps = Vec::new();
    let mut first_k = None;
    let start = runner.cache.snapshot_stats();
    for event in &trace.events {
        match event {
            TraceEvent::InitSegment { .. } => {}
            TraceEvent::Step { step } => {
                if *step > runner.store.current_step() {
                    let t = runner.store.advance_step(*step)?;
                    runner.on_transitions(t)?;
                }
            }
            TraceEvent::Update { step, id, tokens } => runner.on_update(*id, tokens.clone(), *step)?,
            TraceEvent::Query {
                step,
                k,
                embedding,
                tokens,
                ..
            } => {
                first_k.get_or_insert(*k);
                steps.push(runner.query(*step, *k, embedding, tokens)?);
            }
        }
    }
    let totals = runner.cache.snapshot_stats().since(&start);
    Ok(StrategyReport {
        strategy: spec.label(),
        k: k_override.or(first_k).unwrap_or(config.retrieval_k),
        r_avg: config.r_avg,
        summary: summarize(&steps, &totals),
        totals,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    None,
    K(Vec<usize>),
    R(Vec<f64>),
}

/// Runs every (strategy, sweep point) pair; rows keep strategy-major order.
pub fn compare(
    trace: &EpisodeTrace,
    specs: &[StrategySpec],
    sweep: &Sweep,
    config: &EpisodeConfig,
) -> Result<Vec<StrategyReport>> {
    let mut jobs: Vec<(StrategySpec, Option<usize>, f64)> = Vec::new();
    for spec in specs {
        match sweep {
            Sweep::None => jobs.push((*spec, None, config.r_avg)),
            Sweep::K(ks) => jobs.extend(ks.iter().map(|&k| (*spec, Some(k), config.r_avg))),
            Sweep::R(rs) => jobs.extend(rs.iter().map(|&r| (*spec, None, r))),
        }
    }
    jobs.par_iter()
        .map(|(spec, k, r)| {
            let cfg = EpisodeConfig {
                r_avg: *r,
                ..config.clone()
            };
            run_episode_with(trace, *spec, &cfg, *k)
        })
        .collect()
}

pub const CSV_HEADER: &str =
    "strategy,k,r_avg,mean_ttft_tu,p95_ttft_tu,mean_div_l2,mean_div_kl,reuse_ratio,invalidated_tokens,bytes_slow";

pub fn to_csv(reports: &[StrategyReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.6},{:.6},{:.9},{:.9},{:.6},{},{}",
            r.strategy,
            r.k,
            r.r_avg,
            s.mean_ttft_tu,
            s.p95_ttft_tu,
            s.mean_div_l2,
            s.mean_div_kl,
            s.reuse_ratio,
            s.invalidated_tokens,
            s.bytes_slow
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::generate_episode;

    fn small_config() -> EpisodeConfig {
        EpisodeConfig {
            num_steps: 4,
            ..EpisodeConfig::default()
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("fastest".parse::<Strategy>().is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(StrategySpec::new(Strategy::Keep).label(), "keep");
        assert_eq!(
            StrategySpec::new(Strategy::Keep)
                .with_organization(Organization::FixedBlocks)
                .without_multi_hop()
                .with_schedule(Schedule::Overlap)
                .label(),
            "keep+blocks-multihop@overlap"
        );
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn full_is_exact_and_reuses_nothing() {
        let cfg = small_config();
        let trace = generate_episode(&cfg).unwrap();
        let r = run_episode(&trace, StrategySpec::new(Strategy::Full), &cfg).unwrap();
        assert!(r.steps.iter().all(|s| s.divergence.l2 == 0.0 && s.divergence.kl == 0.0));
        assert_eq!(r.summary.reuse_ratio, 0.0);
    }

    #[test]
    fn full_reuse_recomputes_no_memory() {
        let cfg = small_config();
        let trace = generate_episode(&cfg).unwrap();
        let r = run_episode(&trace, StrategySpec::new(Strategy::FullReuse), &cfg).unwrap();
        assert_eq!(r.totals.tokens_recomputed, 0);
        assert_eq!(r.summary.reuse_ratio, 1.0);
    }

    #[test]
    fn every_strategy_runs() {
        let cfg = small_config();
        let trace = generate_episode(&cfg).unwrap();
        for s in Strategy::ALL {
            let r = run_episode(&trace, StrategySpec::new(s), &cfg).unwrap();
            assert_eq!(r.steps.len(), 4, "{s}");
            for st in &r.steps {
                let l = cfg.model.num_layers as u64;
                let mem: u64 = st.realized_segments as u64;
                assert!(mem > 0);
                assert_eq!(
                    (st.stats.tokens_reused + st.stats.tokens_recomputed) % l,
                    0,
                    "{s}: token-layers come in whole layers"
                );
            }
        }
    }

    #[test]
    fn empty_strategy_list_is_header_only() {
        let cfg = small_config();
        let trace = generate_episode(&cfg).unwrap();
        let rows = compare(&trace, &[], &Sweep::None, &cfg).unwrap();
        assert_eq!(to_csv(&rows), format!("{CSV_HEADER}\n"));
    }
}
