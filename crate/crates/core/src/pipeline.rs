//! Discrete-event simulation of layer-wise prefill with KV loading.
//!
//! Three lanes: the compute engine, the loader (one transfer at a time) and
//! the importance evaluator. `Eval(l)` decides the plan of layer `l + 1` and
//! can start once the attention part of `Compute(l)` is done.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cache::TierConfig;
use crate::error::{Error, Result};
use crate::recompute::RecomputePlan;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub compute_tu_per_token_per_layer: f64,
    /// Attention cost per (computed token, context token) pair.
    pub attention_tu_per_token_pair: f64,
    pub eval_tu_per_layer: f64,
    /// Share of a layer's compute spent in attention.
    pub attention_fraction: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.compute_tu_per_token_per_layer > 0.0)
            || !(self.attention_tu_per_token_pair >= 0.0)
            || !(self.eval_tu_per_layer >= 0.0)
            || !(0.0..=1.0).contains(&self.attention_fraction)
        {
            return Err(Error::Config("invalid cost model".into()));
        }
        Ok(())
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            compute_tu_per_token_per_layer: 0.01,
            attention_tu_per_token_pair: 0.0001,
            eval_tu_per_layer: 0.05,
            attention_fraction: 0.5,
        }
    }
}

/// KV of one owner at one layer that must come from the slow tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadItem {
    pub owner: usize,
    pub layer: usize,
    pub bytes: u64,
    pub tu: f64,
    /// Layout positions whose KV the item carries.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWork {
    pub compute_tu: f64,
    #[serde(default)]
    pub eval_tu: f64,
    #[serde(default)]
    pub loads: Vec<LoadItem>,
}

impl LayerWork {
    pub fn load_tu(&self) -> f64 {
        self.loads.iter().map(|i| i.tu).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub attention_fraction: f64,
    /// Whether `plan[l + 1]` is only known once `Eval(l)` finishes.
    #[serde(default)]
    pub adaptive: bool,
    pub plan: Vec<BTreeSet<usize>>,
    pub layers: Vec<LayerWork>,
}

impl Workload {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.layers.is_empty() {
            return bad("workload has no layers".into());
        }
        if self.plan.len() != self.layers.len() {
            return bad(format!(
                "plan has {} layers, workload has {}",
                self.plan.len(),
                self.layers.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.attention_fraction) {
            return bad("attention_fraction outside [0, 1]".into());
        }
        let mut seen = BTreeSet::new();
        for (l, w) in self.layers.iter().enumerate() {
            if !(w.compute_tu > 0.0) || !(w.eval_tu >= 0.0) {
                return bad(format!("layer {l}: compute must be positive, eval non-negative"));
            }
            for it in &w.loads {
                if it.layer != l || !(it.tu > 0.0) {
                    return bad(format!("layer {l}: bad load item for owner {}", it.owner));
                }
                if !seen.insert((it.layer, it.owner)) {
                    return bad(format!("layer {l}: owner {} listed twice", it.owner));
                }
            }
        }
        Ok(())
    }

    pub fn add_compute(&mut self, layer: usize, tu: f64) {
        self.layers[layer].compute_tu += tu;
    }

    fn eval_dur(&self, layer: usize) -> f64 {
        if layer + 1 < self.layers.len() {
            self.layers[layer].eval_tu
        } else {
            0.0
        }
    }

    fn plan_excludes(&self, layer: usize, members: &[usize]) -> bool {
        members.iter().all(|m| !self.plan[layer].contains(m))
    }
}

/// One retrieved unit as the workload derivation sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadUnit {
    pub owner: usize,
    pub members: Vec<usize>,
    pub bytes_per_layer: u64,
    /// Per layer: whether the unit's block sits in the slow tier.
    pub slow: Vec<bool>,
}

/// Per-layer compute from recomputed tokens and slow-tier load items for
/// every unit that is not fully recomputed.
#[allow(clippy::too_many_arguments)]
pub fn derive_workload(
    plan: &RecomputePlan,
    segment_lens: &[usize],
    units: &[WorkloadUnit],
    query_tokens: usize,
    cost: &CostModel,
    tier: &TierConfig,
    adaptive: bool,
) -> Result<Workload> {
    cost.validate()?;
    plan.validate(segment_lens.len())?;
    let num_layers = plan.num_layers();
    let context = segment_lens.iter().sum::<usize>() + query_tokens;
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let set = plan.layer(l).expect("layer in range");
        let computed = set.iter().map(|&s| segment_lens[s]).sum::<usize>() + query_tokens;
        let compute_tu = cost.compute_tu_per_token_per_layer * computed as f64
            + cost.attention_tu_per_token_pair * computed as f64 * context as f64;
        let eval_tu = if adaptive && l + 1 < num_layers {
            cost.eval_tu_per_layer
        } else {
            0.0
        };
        let mut loads = Vec::new();
        for u in units {
            let needed = u.members.iter().any(|m| !set.contains(m));
            if needed && u.slow.get(l).copied().unwrap_or(false) {
                loads.push(LoadItem {
                    owner: u.owner,
                    layer: l,
                    bytes: u.bytes_per_layer,
                    tu: u.bytes_per_layer as f64 / tier.slow_to_fast_bandwidth_bytes_per_tu,
                    members: u.members.clone(),
                });
            }
        }
        loads.sort_by_key(|i| i.owner);
        layers.push(LayerWork {
            compute_tu,
            eval_tu,
            loads,
        });
    }
    Ok(Workload {
        attention_fraction: cost.attention_fraction,
        adaptive,
        plan: plan.layers().to_vec(),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[serde(rename = "seq")]
    Sequential,
    Overlap,
    Balanced,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(Schedule::Sequential),
            "overlap" => Ok(Schedule::Overlap),
            "balanced" => Ok(Schedule::Balanced),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Sequential => "seq",
            Schedule::Overlap => "overlap",
            Schedule::Balanced => "balanced",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Load,
    Compute,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resource {
    LoadEngine,
    ComputeEngine,
    Evaluator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<usize>,
    pub start_tu: f64,
    pub end_tu: f64,
    pub resource: Resource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub schedule: Schedule,
    pub makespan_tu: f64,
    pub events: Vec<Event>,
    pub workload: Workload,
}

impl Timeline {
    pub fn validate(&self) -> Vec<Violation> {
        validate_timeline(self, &self.workload)
    }

    /// Gantt rows: `resource,kind,layer,owner,start,end`.
    pub fn to_gantt_csv(&self) -> String {
        let mut out = String::from("resource,kind,layer,owner,start,end\n");
        for e in &self.events {
            let resource = match e.resource {
                Resource::LoadEngine => "load",
                Resource::ComputeEngine => "compute",
                Resource::Evaluator => "eval",
            };
            let kind = match e.kind {
                EventKind::Load => "load",
                EventKind::Compute => "compute",
                EventKind::Eval => "eval",
            };
            let owner = e.owner.map(|o| o.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{resource},{kind},{},{owner},{:.6},{:.6}",
                e.layer, e.start_tu, e.end_tu
            );
        }
        out
    }
}

struct Builder {
    events: Vec<Event>,
}

impl Builder {
    fn push(&mut self, kind: EventKind, layer: usize, owner: Option<usize>, start: f64, dur: f64) -> f64 {
        let resource = match kind {
            EventKind::Load => Resource::LoadEngine,
            EventKind::Compute => Resource::ComputeEngine,
            EventKind::Eval => Resource::Evaluator,
        };
        if dur > 0.0 {
            self.events.push(Event {
                kind,
                layer,
                owner,
                start_tu: start,
                end_tu: start + dur,
                resource,
            });
        }
        start + dur
    }

    fn finish(mut self, schedule: Schedule, workload: &Workload) -> Timeline {
        self.events.sort_by(|a, b| {
            a.start_tu
                .total_cmp(&b.start_tu)
                .then(a.resource.cmp(&b.resource))
                .then(a.layer.cmp(&b.layer))
                .then(a.owner.cmp(&b.owner))
        });
        let makespan_tu = self.events.iter().map(|e| e.end_tu).fold(0.0, f64::max);
        Timeline {
            schedule,
            makespan_tu,
            events: self.events,
            workload: workload.clone(),
        }
    }
}

/// Evaluation, loads and compute strictly one after another.
pub fn simulate_sequential(workload: &Workload) -> Result<Timeline> {
    workload.validate()?;
    let mut b = Builder { events: Vec::new() };
    let mut t = 0.0;
    for (l, w) in workload.layers.iter().enumerate() {
        // the plan for layer l is only known once Eval(l - 1) is done
        if l > 0 {
            t = b.push(EventKind::Eval, l - 1, None, t, workload.eval_dur(l - 1));
        }
        for it in &w.loads {
            t = b.push(EventKind::Load, l, Some(it.owner), t, it.tu);
        }
        t = b.push(EventKind::Compute, l, None, t, w.compute_tu);
    }
    Ok(b.finish(Schedule::Sequential, workload))
}

/// Next-layer loads run alongside the current layer's compute.
pub fn simulate_overlap(workload: &Workload) -> Result<Timeline> {
    workload.validate()?;
    Ok(pipelined(workload, false).finish(Schedule::Overlap, workload))
}

/// Overlap plus pre-loading of KV for later layers into loader idle time.
pub fn simulate_balanced(workload: &Workload) -> Result<Timeline> {
    workload.validate()?;
    let tl = pipelined(workload, true).finish(Schedule::Balanced, workload);
    let violations = validate_timeline(&tl, workload);
    if let Some(v) = violations.first() {
        return Err(Error::Plan(format!("balanced schedule failed validation: {v}")));
    }
    Ok(tl)
}

pub fn simulate(workload: &Workload, schedule: Schedule) -> Result<Timeline> {
    match schedule {
        Schedule::Sequential => simulate_sequential(workload),
        Schedule::Overlap => simulate_overlap(workload),
        Schedule::Balanced => simulate_balanced(workload),
    }
}

fn pipelined(workload: &Workload, preload: bool) -> Builder {
    let n = workload.num_layers();
    let af = workload.attention_fraction;
    let mut b = Builder { events: Vec::new() };
    let mut done: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut loader = 0.0f64;
    let mut evaluator = 0.0f64;

    // layer 0 plan is known up front
    for it in &workload.layers[0].loads {
        loader = b.push(EventKind::Load, 0, Some(it.owner), loader, it.tu);
    }
    let mut compute_start = loader;
    for l in 0..n {
        let c = workload.layers[l].compute_tu;
        let compute_end = b.push(EventKind::Compute, l, None, compute_start, c);
        if l + 1 == n {
            break;
        }
        let eval_start = evaluator.max(compute_start + af * c);
        let release = b.push(EventKind::Eval, l, None, eval_start, workload.eval_dur(l));
        evaluator = release;

        // loads for l + 1; with an adaptive plan, owners still recomputed at l
        // are only known to be needed after Eval(l)
        let mut next: Vec<&LoadItem> = workload.layers[l + 1]
            .loads
            .iter()
            .filter(|it| !done.contains(&(it.layer, it.owner)))
            .collect();
        let gated = |it: &LoadItem| workload.adaptive && !workload.plan_excludes(l, &it.members);
        next.sort_by_key(|it| (gated(it), it.owner));
        loader = loader.max(compute_start);
        for it in next {
            let start = if gated(it) { loader.max(release) } else { loader };
            loader = b.push(EventKind::Load, l + 1, Some(it.owner), start, it.tu);
            done.insert((it.layer, it.owner));
        }

        if preload {
            let mut t = loader.max(compute_start);
            loop {
                let k = if !workload.adaptive || release <= t + EPS { l + 1 } else { l };
                let pick = workload
                    .layers
                    .iter()
                    .skip(l + 2)
                    .flat_map(|w| w.loads.iter())
                    .find(|it| {
                        !done.contains(&(it.layer, it.owner))
                            && t + it.tu <= compute_end + EPS
                            && workload.plan_excludes(k, &it.members)
                    });
                match pick {
                    Some(it) => {
                        t = b.push(EventKind::Load, it.layer, Some(it.owner), t, it.tu);
                        done.insert((it.layer, it.owner));
                    }
                    None if k == l && release < compute_end => t = release,
                    None => break,
                }
            }
            loader = loader.max(t);
        }
        compute_start = compute_end.max(release).max(loader);
    }
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.rule, self.message)
    }
}

/// Checks a timeline against its workload.
///
/// Rules: `R` no overlap within a lane; `D1` evaluation and loads for a layer
/// end before that layer's compute; `D2` evaluation starts after the
/// attention part of its compute; `P` every load item appears exactly once
/// with its workload duration and every compute/eval matches the workload;
/// `S` a load never starts before the plan that makes it necessary is known.
pub fn validate_timeline(timeline: &Timeline, workload: &Workload) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |rule: &str, message: String| {
        out.push(Violation {
            rule: rule.into(),
            message,
        })
    };
    if let Err(e) = workload.validate() {
        flag("P", format!("invalid workload: {e}"));
        return out;
    }
    let n = workload.num_layers();
    let af = workload.attention_fraction;

    for e in &timeline.events {
        if !(e.end_tu > e.start_tu) || e.start_tu < -EPS {
            flag("R", format!("{:?} layer {} has non-positive duration", e.kind, e.layer));
        }
        let want = match e.kind {
            EventKind::Load => Resource::LoadEngine,
            EventKind::Compute => Resource::ComputeEngine,
            EventKind::Eval => Resource::Evaluator,
        };
        if e.resource != want {
            flag("R", format!("{:?} layer {} on wrong resource", e.kind, e.layer));
        }
    }
    for res in [Resource::LoadEngine, Resource::ComputeEngine, Resource::Evaluator] {
        let mut evs: Vec<&Event> = timeline.events.iter().filter(|e| e.resource == res).collect();
        evs.sort_by(|a, b| a.start_tu.total_cmp(&b.start_tu));
        for w in evs.windows(2) {
            if w[1].start_tu < w[0].end_tu - EPS {
                flag(
                    "R",
                    format!(
                        "{res:?}: layer {} at {} overlaps layer {} ending {}",
                        w[1].layer, w[1].start_tu, w[0].layer, w[0].end_tu
                    ),
                );
            }
        }
    }

    let single = |kind: EventKind, l: usize| -> Vec<&Event> {
        timeline
            .events
            .iter()
            .filter(|e| e.kind == kind && e.layer == l)
            .collect()
    };
    let mut compute = Vec::with_capacity(n);
    for l in 0..n {
        let c = single(EventKind::Compute, l);
        if c.len() != 1 || (c[0].end_tu - c[0].start_tu - workload.layers[l].compute_tu).abs() > 1e-6 {
            flag("P", format!("layer {l}: expected one compute of {}", workload.layers[l].compute_tu));
            return out;
        }
        compute.push(c[0]);
    }
    for l in 1..n {
        if compute[l].start_tu < compute[l - 1].end_tu - EPS {
            flag("D1", format!("compute {l} starts before compute {} ends", l - 1));
        }
    }

    let mut release = vec![0.0; n];
    for l in 0..n {
        let dur = workload.eval_dur(l);
        let evs = single(EventKind::Eval, l);
        let earliest = compute[l].start_tu + af * workload.layers[l].compute_tu;
        release[l] = earliest;
        if dur > 0.0 {
            if evs.len() != 1 || (evs[0].end_tu - evs[0].start_tu - dur).abs() > 1e-6 {
                flag("P", format!("layer {l}: expected one eval of {dur}"));
                continue;
            }
            let e = evs[0];
            release[l] = e.end_tu;
            if e.start_tu < earliest - EPS {
                flag("D2", format!("eval {l} starts at {} before attention ends at {earliest}", e.start_tu));
            }
            if l + 1 < n && e.end_tu > compute[l + 1].start_tu + EPS {
                flag("D1", format!("eval {l} ends after compute {} starts", l + 1));
            }
        } else if !evs.is_empty() {
            flag("P", format!("layer {l}: unexpected eval"));
        }
    }

    let mut loads: Vec<&Event> = timeline.events.iter().filter(|e| e.kind == EventKind::Load).collect();
    for (l, w) in workload.layers.iter().enumerate() {
        for it in &w.loads {
            let found: Vec<usize> = loads
                .iter()
                .enumerate()
                .filter(|(_, e)| e.layer == l && e.owner == Some(it.owner))
                .map(|(i, _)| i)
                .collect();
            if found.len() != 1 {
                flag("P", format!("layer {l} owner {} loaded {} times", it.owner, found.len()));
                continue;
            }
            let e = loads.swap_remove(found[0]);
            if (e.end_tu - e.start_tu - it.tu).abs() > 1e-6 {
                flag("P", format!("layer {l} owner {} load lasts {}", it.owner, e.end_tu - e.start_tu));
            }
            if e.end_tu > compute[l].start_tu + EPS {
                flag("D1", format!("layer {l} owner {} loaded after its compute starts", it.owner));
            }
            // the newest layer whose compute has started when the load begins
            let j = compute.iter().rposition(|c| c.start_tu <= e.start_tu + EPS);
            let k = match j {
                None => 0,
                Some(j) if j + 1 >= n => n - 1,
                Some(j) if !workload.adaptive || release[j] <= e.start_tu + EPS => j + 1,
                Some(j) => j,
            };
            if l > k && !workload.plan_excludes(k, &it.members) {
                flag(
                    "S",
                    format!("layer {l} owner {} loaded while still recomputed at layer {k}", it.owner),
                );
            }
        }
    }
    for e in loads {
        flag("P", format!("unexpected load of layer {} owner {:?}", e.layer, e.owner));
    }
    out
}
