//! KV-cache-centric memory management for long, frequently updated contexts.
//!
//! The crate contains a deterministic toy transformer used as a numerical
//! oracle, a memory store with static/dynamic groups, a two-tier KV cache,
//! selective-recompute planners, and a discrete-event simulator of the
//! load/compute pipeline.

pub mod cache;
pub mod episode;
pub mod error;
pub mod harness;
pub mod memory;
pub mod pipeline;
pub mod recompute;
pub mod rng;
pub mod tensor;
pub mod transformer;

pub use cache::{CacheManager, KVBlock, KvOwner, ReuseStats, Tier, TierConfig};
pub use error::{Error, Result};
pub use memory::{
    GroupId, GroupState, GroupTransition, InvalidatedKv, InvalidationRecord, MemoryGroup,
    MemorySegment, MemoryStore, RetrievalSet, RetrievalUnit, SegmentId, StoreConfig,
};
pub use recompute::{RatioSchedule, RecomputePlan, StrategyResult};
pub use transformer::{
    AttentionSummary, Divergence, FinalState, LayerKV, Model, ModelConfig, PrefillOutput,
    SelectiveOutput,
};
pub use pipeline::{
    CostModel, Event, EventKind, LoadItem, Resource, Schedule, Timeline, Violation, Workload,
};
pub use episode::{CategorySpec, EpisodeConfig, EpisodeTrace, TraceEvent};
pub use harness::{
    compare, run_episode, to_csv, Organization, StepReport, Strategy, StrategyReport,
    StrategySpec, Summary, Sweep,
};
