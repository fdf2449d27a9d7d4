//! Fixtures shared by the benchmarks in `benches/`.

use std::collections::BTreeSet;

use kvmem_core::pipeline::LayerWork;
use kvmem_core::rng::splitmix64;
use kvmem_core::transformer::{segment_prefill, AttentionSummary, LayerKV, Model, ModelConfig};
use kvmem_core::{LoadItem, Workload};

pub struct Prompt {
    pub model: Model,
    pub layout: Vec<Vec<u32>>,
    pub query: Vec<u32>,
    pub cached: Vec<Option<Vec<LayerKV>>>,
}

fn tokens(seed: u64, n: usize, vocab: usize) -> Vec<u32> {
    (0..n as u64)
        .map(|i| (splitmix64(seed ^ i.wrapping_mul(0x9e37_79b9)) % vocab as u64) as u32)
        .collect()
}

/// `segments` segments of `seg_tokens` tokens each on the default model
/// shape, with every segment's KV computed in isolation.
pub fn prompt(segments: usize, seg_tokens: usize, seed: u64) -> Prompt {
    let config = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let model = Model::new(config).expect("valid model");
    let layout: Vec<Vec<u32>> = (0..segments)
        .map(|s| tokens(seed.wrapping_add(s as u64 + 1), seg_tokens, config.vocab_size))
        .collect();
    let query = tokens(seed, 4, config.vocab_size);
    let cached = layout
        .iter()
        .map(|seg| Some(segment_prefill(&model, seg).expect("prefill")))
        .collect();
    Prompt {
        model,
        layout,
        query,
        cached,
    }
}

/// Dense lower-triangular attention over `n` segments.
pub fn attention(n: usize) -> AttentionSummary {
    let unit = |x: u64| (splitmix64(x) % 1000) as f32 / 1000.0;
    AttentionSummary {
        layer: 0,
        query_to_segment: (0..n as u64).map(unit).collect(),
        segment_to_segment: (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if j < i { unit((i * n + j) as u64 + 7) / i as f32 } else { 0.0 })
                    .collect()
            })
            .collect(),
    }
}

/// An adaptive workload whose plan halves each layer and whose dropped
/// segments load from the slow tier.
pub fn workload(layers: usize, segments: usize) -> Workload {
    let mut plan = Vec::with_capacity(layers);
    let mut keep = segments;
    for _ in 0..layers {
        plan.push((0..keep).collect::<BTreeSet<usize>>());
        keep = (keep / 2).max(1);
    }
    let layers = plan
        .iter()
        .enumerate()
        .map(|(l, set)| LayerWork {
            compute_tu: 1.0 + set.len() as f64 * 0.1,
            eval_tu: 0.05,
            loads: (0..segments)
                .filter(|s| !set.contains(s))
                .map(|s| LoadItem {
                    owner: s,
                    layer: l,
                    bytes: 4096,
                    tu: 0.25,
                    members: vec![s],
                })
                .collect(),
        })
        .collect();
    Workload {
        attention_fraction: 0.5,
        adaptive: true,
        plan,
        layers,
    }
}
