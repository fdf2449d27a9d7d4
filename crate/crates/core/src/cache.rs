//! Two-tier KV block storage with LRU demotion and reuse accounting.
//!
//! The fast tier has a byte capacity; the slow tier is unbounded. Loading a
//! slow block costs `size_bytes / slow_to_fast_bandwidth` time units and
//! promotes it. Blocks are keyed by owner and layer; a block is served only
//! while its version is the owner's current version.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{GroupId, InvalidationRecord, SegmentId};
use crate::transformer::LayerKV;

/// Who a KV block belongs to: a single segment, or a static group's joint KV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KvOwner {
    Segment(SegmentId),
    Group(GroupId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Fast,
    Slow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVBlock {
    pub owner: KvOwner,
    pub version: u64,
    pub layer: usize,
    pub payload: LayerKV,
    pub size_bytes: u64,
    pub tier: Tier,
}

impl KVBlock {
    pub fn new(owner: KvOwner, version: u64, payload: LayerKV) -> Self {
        let size_bytes = (payload.keys.rows() * payload.keys.cols() * 2 * 4) as u64;
        Self {
            owner,
            version,
            layer: payload.layer,
            payload,
            size_bytes,
            tier: Tier::Fast,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.payload.num_tokens()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    pub fast_capacity_bytes: u64,
    pub fast_bandwidth_bytes_per_tu: f64,
    pub slow_to_fast_bandwidth_bytes_per_tu: f64,
}

impl TierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fast_capacity_bytes == 0
            || !(self.fast_bandwidth_bytes_per_tu > 0.0)
            || !(self.slow_to_fast_bandwidth_bytes_per_tu > 0.0)
        {
            return Err(Error::Config("tier capacities and bandwidths must be positive".into()));
        }
        if self.slow_to_fast_bandwidth_bytes_per_tu > self.fast_bandwidth_bytes_per_tu {
            return Err(Error::Config(
                "slow-to-fast bandwidth exceeds fast bandwidth".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            fast_capacity_bytes: 128 * 1024,
            fast_bandwidth_bytes_per_tu: 65536.0,
            slow_to_fast_bandwidth_bytes_per_tu: 16384.0,
        }
    }
}

/// Token counters. `tokens_reused` / `tokens_recomputed` count memory
/// token-layers (one per token per layer).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReuseStats {
    pub tokens_reused: u64,
    pub tokens_recomputed: u64,
    pub tokens_invalidated: u64,
    pub bytes_loaded_slow: u64,
    pub cache_misses: u64,
}

impl ReuseStats {
    pub fn accumulate(&mut self, other: &ReuseStats) {
        self.tokens_reused += other.tokens_reused;
        self.tokens_recomputed += other.tokens_recomputed;
        self.tokens_invalidated += other.tokens_invalidated;
        self.bytes_loaded_slow += other.bytes_loaded_slow;
        self.cache_misses += other.cache_misses;
    }

    /// Counter growth since `earlier`.
    pub fn since(&self, earlier: &ReuseStats) -> ReuseStats {
        ReuseStats {
            tokens_reused: self.tokens_reused - earlier.tokens_reused,
            tokens_recomputed: self.tokens_recomputed - earlier.tokens_recomputed,
            tokens_invalidated: self.tokens_invalidated - earlier.tokens_invalidated,
            bytes_loaded_slow: self.bytes_loaded_slow - earlier.bytes_loaded_slow,
            cache_misses: self.cache_misses - earlier.cache_misses,
        }
    }

    pub fn reuse_ratio(&self) -> f64 {
        let total = self.tokens_reused + self.tokens_recomputed;
        if total == 0 {
            0.0
        } else {
            self.tokens_reused as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    block: KVBlock,
    touched: u64,
}

#[derive(Debug, Clone)]
pub struct CacheManager {
    config: TierConfig,
    slots: HashMap<(KvOwner, usize), Slot>,
    /// Fast-tier residents by last touch; oldest first.
    lru: BTreeMap<u64, (KvOwner, usize)>,
    current: HashMap<KvOwner, u64>,
    fast_used: u64,
    clock: u64,
    stats: ReuseStats,
}

impl CacheManager {
    pub fn new(config: TierConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            slots: HashMap::new(),
            lru: BTreeMap::new(),
            current: HashMap::new(),
            fast_used: 0,
            clock: 0,
            stats: ReuseStats::default(),
        })
    }

    pub fn config(&self) -> &TierConfig {
        &self.config
    }

    pub fn fast_used_bytes(&self) -> u64 {
        self.fast_used
    }

    pub fn current_version(&self, owner: KvOwner) -> Option<u64> {
        self.current.get(&owner).copied()
    }

    pub fn tier_of(&self, owner: KvOwner, layer: usize) -> Option<Tier> {
        self.slots.get(&(owner, layer)).map(|s| s.block.tier)
    }

    pub fn block(&self, owner: KvOwner, layer: usize) -> Option<&KVBlock> {
        self.slots.get(&(owner, layer)).map(|s| &s.block)
    }

    /// True when every layer of `owner` holds a block at `version` and that
    /// version is current.
    pub fn is_resident(&self, owner: KvOwner, version: u64, num_layers: usize) -> bool {
        self.current_version(owner) == Some(version)
            && (0..num_layers).all(|l| {
                self.slots
                    .get(&(owner, l))
                    .is_some_and(|s| s.block.version == version)
            })
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn demote_until_fits(&mut self, size: u64) {
        while self.fast_used + size > self.config.fast_capacity_bytes {
            let Some((_, key)) = self.lru.pop_first() else {
                break;
            };
            let slot = self.slots.get_mut(&key).expect("lru entry has a slot");
            slot.block.tier = Tier::Slow;
            self.fast_used -= slot.block.size_bytes;
        }
    }

    /// Places `key` in the fast tier if it can ever fit; returns the tier.
    fn place(&mut self, key: (KvOwner, usize)) -> Tier {
        let size = self.slots[&key].block.size_bytes;
        let now = self.tick();
        if size > self.config.fast_capacity_bytes {
            let slot = self.slots.get_mut(&key).expect("slot");
            slot.block.tier = Tier::Slow;
            slot.touched = now;
            return Tier::Slow;
        }
        self.demote_until_fits(size);
        let slot = self.slots.get_mut(&key).expect("slot");
        slot.block.tier = Tier::Fast;
        slot.touched = now;
        self.lru.insert(now, key);
        self.fast_used += size;
        Tier::Fast
    }

    fn remove(&mut self, key: (KvOwner, usize)) -> Option<KVBlock> {
        let slot = self.slots.remove(&key)?;
        if slot.block.tier == Tier::Fast {
            self.lru.remove(&slot.touched);
            self.fast_used -= slot.block.size_bytes;
        }
        Some(slot.block)
    }

    /// Stores a block, replacing whatever sat at the same owner and layer.
    pub fn put(&mut self, block: KVBlock) -> Tier {
        let key = (block.owner, block.layer);
        self.remove(key);
        let cur = self.current.entry(block.owner).or_insert(block.version);
        *cur = (*cur).max(block.version);
        self.slots.insert(
            key,
            Slot {
                block,
                touched: 0,
            },
        );
        self.place(key)
    }

    /// Returns the current-version payload and its load cost in time units.
    pub fn load_memory(&mut self, owner: KvOwner, layer: usize) -> Result<(LayerKV, f64)> {
        let key = (owner, layer);
        let current = self.current.get(&owner).copied();
        let slot = match self.slots.get(&key) {
            Some(s) if Some(s.block.version) == current => s,
            Some(s) => {
                self.stats.cache_misses += 1;
                return Err(Error::CacheMiss(format!(
                    "{owner:?} layer {layer}: stale version {} (current {current:?})",
                    s.block.version
                )));
            }
            None => {
                self.stats.cache_misses += 1;
                return Err(Error::CacheMiss(format!("{owner:?} layer {layer}: absent")));
            }
        };
        let payload = slot.block.payload.clone();
        match slot.block.tier {
            Tier::Fast => {
                let old = slot.touched;
                self.lru.remove(&old);
                let now = self.tick();
                let slot = self.slots.get_mut(&key).expect("slot");
                slot.touched = now;
                self.lru.insert(now, key);
                Ok((payload, 0.0))
            }
            Tier::Slow => {
                let size = slot.block.size_bytes;
                let cost = size as f64 / self.config.slow_to_fast_bandwidth_bytes_per_tu;
                self.stats.bytes_loaded_slow += size;
                self.place(key);
                Ok((payload, cost))
            }
        }
    }

    /// Drops every block matching a record entry's owner and version. Returns
    /// the tokens dropped (once per owner, not per layer).
    pub fn invalidate(&mut self, record: &InvalidationRecord) -> u64 {
        let mut count = 0;
        for entry in &record.entries {
            let keys: Vec<_> = self
                .slots
                .iter()
                .filter(|(_, s)| s.block.owner == entry.owner && s.block.version == entry.version)
                .map(|(k, _)| *k)
                .collect();
            if !keys.is_empty() {
                count += entry.tokens as u64;
            }
            for k in keys {
                self.remove(k);
            }
            let cur = self.current.entry(entry.owner).or_insert(0);
            *cur = (*cur).max(entry.version + 1);
        }
        self.stats.tokens_invalidated += count;
        count
    }

    /// Discards all blocks of an owner without charging invalidation (used when
    /// a group switches computation granularity).
    pub fn evict_owner(&mut self, owner: KvOwner) {
        let keys: Vec<_> = self
            .slots
            .keys()
            .filter(|(o, _)| *o == owner)
            .copied()
            .collect();
        for k in keys {
            self.remove(k);
        }
    }

    pub fn record_prefill(&mut self, delta: &ReuseStats) {
        self.stats.tokens_reused += delta.tokens_reused;
        self.stats.tokens_recomputed += delta.tokens_recomputed;
    }

    pub fn record_miss(&mut self) {
        self.stats.cache_misses += 1;
    }

    pub fn snapshot_stats(&self) -> ReuseStats {
        self.stats
    }

    /// Fast-tier residents, least recently touched first.
    pub fn lru_order(&self) -> Vec<(KvOwner, usize)> {
        self.lru.values().copied().collect()
    }
}
