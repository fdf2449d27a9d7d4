//! Memory segments, semantic groups and the static/dynamic state machine.
//!
//! A group whose members have all been quiet for `t` steps is Static: its KV
//! is computed jointly (members attend to each other) and it is retrieved as a
//! whole. Any member update flips it back to Dynamic, where every member has
//! its own KV and is retrieved individually.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::KvOwner;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u32);

const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySegment {
    pub id: SegmentId,
    pub category: String,
    pub tokens: Vec<u32>,
    pub embedding: Vec<f32>,
    pub version: u64,
    pub last_update_step: u64,
}

impl MemorySegment {
    pub fn new(id: SegmentId, category: impl Into<String>, tokens: Vec<u32>, embedding: Vec<f32>) -> Self {
        Self {
            id,
            category: category.into(),
            tokens,
            embedding,
            version: 0,
            last_update_step: 0,
        }
    }

    fn check(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Store(format!("segment {} has no tokens", self.id.0)));
        }
        let norm = self
            .embedding
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::Store(format!(
                "segment {} embedding norm {norm} is not 1",
                self.id.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupState {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryGroup {
    pub id: GroupId,
    pub member_ids: Vec<SegmentId>,
    pub state: GroupState,
    /// Step of the newest member update (or insertion).
    pub last_change_step: u64,
    /// Version of the group's joint KV; bumped each time a Static group is
    /// broken up by an update.
    pub version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub t: u64,
    pub num_groups: usize,
    pub seed: u64,
}

impl StoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("stability window t must be at least 1".into()));
        }
        if self.num_groups == 0 {
            return Err(Error::Config("num_groups must be positive".into()));
        }
        Ok(())
    }
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            t: 10,
            num_groups: 4,
            seed: 0,
        }
    }
}

/// One KV owner-version whose blocks must be dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidatedKv {
    pub owner: KvOwner,
    pub version: u64,
    /// Tokens per layer covered by the owner's blocks.
    pub tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidationRecord {
    pub entries: Vec<InvalidatedKv>,
}

impl InvalidationRecord {
    pub fn total_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.tokens).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A Dynamic group became Static; its joint KV must be computed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTransition {
    pub group: GroupId,
    pub step: u64,
    pub version: u64,
    pub members: Vec<SegmentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RetrievalUnit {
    Group { id: GroupId, members: Vec<SegmentId> },
    Segment { id: SegmentId },
}

impl RetrievalUnit {
    pub fn segments(&self) -> Vec<SegmentId> {
        match self {
            RetrievalUnit::Group { members, .. } => members.clone(),
            RetrievalUnit::Segment { id } => vec![*id],
        }
    }

    fn order_key(&self) -> (u8, u32) {
        match self {
            RetrievalUnit::Group { id, .. } => (0, id.0),
            RetrievalUnit::Segment { id } => (1, id.0),
        }
    }
}

/// Retrieved units in canonical layout order: groups by id, then dynamic
/// segments by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub units: Vec<RetrievalUnit>,
}

impl RetrievalSet {
    pub fn segments(&self) -> Vec<SegmentId> {
        self.units.iter().flat_map(RetrievalUnit::segments).collect()
    }

    pub fn num_segments(&self) -> usize {
        self.units
            .iter()
            .map(|u| match u {
                RetrievalUnit::Group { members, .. } => members.len(),
                RetrievalUnit::Segment { .. } => 1,
            })
            .sum()
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

const KMEANS_MAX_ITERS: usize = 100;

/// Seeded k-means++ over segment embeddings. Groups come out ordered by their
/// smallest member id, members by id, all Dynamic.
pub fn cluster_segments(segments: &[MemorySegment], config: &StoreConfig) -> Result<Vec<MemoryGroup>> {
    config.validate()?;
    if segments.is_empty() {
        return Err(Error::Config("no segments to cluster".into()));
    }
    if config.num_groups > segments.len() {
        return Err(Error::Config(format!(
            "num_groups {} exceeds segment count {}",
            config.num_groups,
            segments.len()
        )));
    }
    let mut segs: Vec<&MemorySegment> = segments.iter().collect();
    segs.sort_by_key(|s| s.id);
    let points: Vec<&[f32]> = segs.iter().map(|s| s.embedding.as_slice()).collect();
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }

    let mut rng = rng::stream(config.seed, "kmeans");
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(config.num_groups);
    let mut chosen = vec![false; points.len()];
    let first = rng.random_range(0..points.len());
    chosen[first] = true;
    centers.push(points[first].iter().map(|&x| f64::from(x)).collect());
    while centers.len() < config.num_groups {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| p.iter().zip(c).map(|(&x, &y)| (f64::from(x) - y).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            chosen.iter().position(|&c| !c).expect("fewer centers than points")
        };
        chosen[pick] = true;
        centers.push(points[pick].iter().map(|&x| f64::from(x)).collect());
    }

    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.iter().enumerate() {
                let d: f64 = p.iter().zip(center).map(|(&x, &y)| (f64::from(x) - y).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..points.len()).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for (j, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|&i| f64::from(points[i][j])).sum::<f64>() / members.len() as f64;
            }
        }
    }

    let mut clusters: Vec<Vec<SegmentId>> = (0..centers.len())
        .map(|c| (0..points.len()).filter(|&i| assign[i] == c).map(|i| segs[i].id).collect())
        .filter(|m: &Vec<SegmentId>| !m.is_empty())
        .collect();
    clusters.sort_by_key(|m| m[0]);
    Ok(clusters
        .into_iter()
        .enumerate()
        .map(|(g, member_ids)| {
            let last = member_ids
                .iter()
                .map(|id| segs.iter().find(|s| s.id == *id).map_or(0, |s| s.last_update_step))
                .max()
                .unwrap_or(0);
            MemoryGroup {
                id: GroupId(g as u32),
                member_ids,
                state: GroupState::Dynamic,
                last_change_step: last,
                version: 0,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    config: StoreConfig,
    segments: BTreeMap<SegmentId, MemorySegment>,
    groups: BTreeMap<GroupId, MemoryGroup>,
    group_of: BTreeMap<SegmentId, GroupId>,
    current_step: u64,
    #[serde(default)]
    pending: Vec<GroupTransition>,
}

impl MemoryStore {
    /// Clusters `segments` into groups; the store starts at `step`.
    pub fn new(config: StoreConfig, segments: Vec<MemorySegment>, step: u64) -> Result<Self> {
        for s in &segments {
            s.check()?;
        }
        let groups = cluster_segments(&segments, &config)?;
        let mut store = Self {
            config,
            segments: BTreeMap::new(),
            groups: BTreeMap::new(),
            group_of: BTreeMap::new(),
            current_step: step,
            pending: Vec::new(),
        };
        for s in segments {
            if store.segments.insert(s.id, s).is_some() {
                return Err(Error::Store("duplicate segment id".into()));
            }
        }
        for g in groups {
            for m in &g.member_ids {
                store.group_of.insert(*m, g.id);
            }
            store.groups.insert(g.id, g);
        }
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn current_step(&self) -> u64 {
        self.current_step
    }

    pub fn segment(&self, id: SegmentId) -> Option<&MemorySegment> {
        self.segments.get(&id)
    }

    pub fn segments(&self) -> impl Iterator<Item = &MemorySegment> {
        self.segments.values()
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn group(&self, id: GroupId) -> Option<&MemoryGroup> {
        self.groups.get(&id)
    }

    pub fn groups(&self) -> impl Iterator<Item = &MemoryGroup> {
        self.groups.values()
    }

    pub fn group_of(&self, id: SegmentId) -> Option<GroupId> {
        self.group_of.get(&id).copied()
    }

    /// Total tokens across a group's members.
    pub fn group_tokens(&self, id: GroupId) -> usize {
        self.groups.get(&id).map_or(0, |g| {
            g.member_ids.iter().map(|m| self.segments[m].tokens.len()).sum()
        })
    }

    /// Transitions produced by implicit step advances inside `apply_update`
    /// and `insert_segment`.
    pub fn take_pending_transitions(&mut self) -> Vec<GroupTransition> {
        std::mem::take(&mut self.pending)
    }

    fn catch_up(&mut self, step: u64) -> Result<()> {
        if step < self.current_step {
            return Err(Error::Store(format!(
                "step {step} is before current step {}",
                self.current_step
            )));
        }
        if step > self.current_step {
            let t = self.advance_step(step)?;
            self.pending.extend(t);
        }
        Ok(())
    }

    /// Marks the owning group Dynamic at `step` and returns what its KV loss is.
    fn touch_group(&mut self, g: GroupId, step: u64) -> Option<InvalidatedKv> {
        let tokens = self.group_tokens(g);
        let group = self.groups.get_mut(&g).expect("group exists");
        group.last_change_step = step;
        if group.state == GroupState::Static {
            let entry = InvalidatedKv {
                owner: KvOwner::Group(g),
                version: group.version,
                tokens,
            };
            group.state = GroupState::Dynamic;
            group.version += 1;
            Some(entry)
        } else {
            None
        }
    }

    /// Replaces a segment's tokens. A Dynamic owner loses only this segment's
    /// KV; a Static owner loses its joint KV and turns Dynamic.
    pub fn apply_update(&mut self, id: SegmentId, new_tokens: Vec<u32>, step: u64) -> Result<InvalidationRecord> {
        if !self.segments.contains_key(&id) {
            return Err(Error::Store(format!("unknown segment {}", id.0)));
        }
        if new_tokens.is_empty() {
            return Err(Error::Store(format!("update of segment {} has no tokens", id.0)));
        }
        self.catch_up(step)?;
        let g = self.group_of[&id];
        let seg = self.segments.get_mut(&id).expect("checked");
        let own = InvalidatedKv {
            owner: KvOwner::Segment(id),
            version: seg.version,
            tokens: seg.tokens.len(),
        };
        seg.tokens = new_tokens;
        seg.version += 1;
        seg.last_update_step = step;
        let entry = self.touch_group(g, step).unwrap_or(own);
        Ok(InvalidationRecord { entries: vec![entry] })
    }

    /// Moves to `step` and turns every group quiet for at least `t` steps
    /// Static.
    pub fn advance_step(&mut self, step: u64) -> Result<Vec<GroupTransition>> {
        if step <= self.current_step {
            return Err(Error::Store(format!(
                "step {step} does not advance past {}",
                self.current_step
            )));
        }
        self.current_step = step;
        let t = self.config.t;
        let mut out = Vec::new();
        for g in self.groups.values_mut() {
            if g.state == GroupState::Dynamic && g.last_change_step + t <= step {
                g.state = GroupState::Static;
                out.push(GroupTransition {
                    group: g.id,
                    step,
                    version: g.version,
                    members: g.member_ids.clone(),
                });
            }
        }
        Ok(out)
    }

    /// Adds a segment to the group with the most similar centroid; that group
    /// turns Dynamic.
    pub fn insert_segment(&mut self, mut segment: MemorySegment, step: u64) -> Result<InvalidationRecord> {
        segment.check()?;
        if self.segments.contains_key(&segment.id) {
            return Err(Error::Store(format!("segment {} already exists", segment.id.0)));
        }
        self.catch_up(step)?;
        let mut best: Option<(f64, GroupId)> = None;
        for g in self.groups.values() {
            let centroid = self.centroid(g);
            let d = sq_dist(&segment.embedding, &centroid);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, g.id));
            }
        }
        let (_, gid) = best.ok_or_else(|| Error::Store("store has no groups".into()))?;
        segment.last_update_step = step;
        let entry = self.touch_group(gid, step);
        let group = self.groups.get_mut(&gid).expect("group exists");
        let pos = group.member_ids.partition_point(|m| *m < segment.id);
        group.member_ids.insert(pos, segment.id);
        self.group_of.insert(segment.id, gid);
        self.segments.insert(segment.id, segment);
        Ok(InvalidationRecord {
            entries: entry.into_iter().collect(),
        })
    }

    fn centroid(&self, g: &MemoryGroup) -> Vec<f32> {
        let dim = self.segments[&g.member_ids[0]].embedding.len();
        let mut c = vec![0.0f64; dim];
        for m in &g.member_ids {
            for (acc, &x) in c.iter_mut().zip(&self.segments[m].embedding) {
                *acc += f64::from(x);
            }
        }
        c.iter().map(|&x| (x / g.member_ids.len() as f64) as f32).collect()
    }

    /// Group-aware retrieval: Static groups compete as whole units scored by
    /// their best member, Dynamic segments compete alone.
    pub fn retrieve(&self, query: &[f32], k: usize) -> Result<RetrievalSet> {
        self.retrieve_with(query, k, false)
    }

    /// Retrieval that ignores grouping, so every segment is its own unit.
    pub fn retrieve_segments(&self, query: &[f32], k: usize) -> Result<RetrievalSet> {
        self.retrieve_with(query, k, true)
    }

    fn retrieve_with(&self, query: &[f32], k: usize, flat: bool) -> Result<RetrievalSet> {
        if self.segments.is_empty() {
            return Err(Error::Store("empty store".into()));
        }
        if k == 0 {
            return Err(Error::Config("retrieval k must be at least 1".into()));
        }
        let mut candidates: Vec<(f64, RetrievalUnit)> = Vec::new();
        for g in self.groups.values() {
            if g.state == GroupState::Static && !flat {
                let score = g
                    .member_ids
                    .iter()
                    .map(|m| cosine(query, &self.segments[m].embedding))
                    .fold(f64::NEG_INFINITY, f64::max);
                candidates.push((
                    score,
                    RetrievalUnit::Group {
                        id: g.id,
                        members: g.member_ids.clone(),
                    },
                ));
            } else {
                for m in &g.member_ids {
                    candidates.push((
                        cosine(query, &self.segments[m].embedding),
                        RetrievalUnit::Segment { id: *m },
                    ));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.order_key().cmp(&b.1.order_key())));
        let mut units = Vec::new();
        let mut count = 0;
        for (_, unit) in candidates {
            if count >= k {
                break;
            }
            count += unit.segments().len();
            units.push(unit);
        }
        units.sort_by_key(RetrievalUnit::order_key);
        Ok(RetrievalSet { units })
    }

    /// Checks partition and state soundness.
    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for g in self.groups.values() {
            for m in &g.member_ids {
                if seen.insert(*m, g.id).is_some() {
                    return Err(Error::Store(format!("segment {} in two groups", m.0)));
                }
            }
            let newest = g
                .member_ids
                .iter()
                .map(|m| self.segments[m].last_update_step)
                .max()
                .unwrap_or(0);
            let quiet = newest + self.config.t <= self.current_step;
            if quiet != (g.state == GroupState::Static) {
                return Err(Error::Store(format!(
                    "group {} state {:?} disagrees with newest update {newest} at step {}",
                    g.id.0, g.state, self.current_step
                )));
            }
        }
        if seen.len() != self.segments.len() {
            return Err(Error::Store("some segment has no group".into()));
        }
        Ok(())
    }
}
