//! Synthetic agent-memory episodes: segments in categories that update at
//! different rates, and one retrieval query per step.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::TierConfig;
use crate::error::{Error, Result};
use crate::memory::{MemorySegment, SegmentId, StoreConfig};
use crate::pipeline::CostModel;
use crate::rng;
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub count: usize,
    pub tokens_per_segment: usize,
    pub update_prob_per_step: f64,
}

fn default_embedding_dim() -> usize {
    16
}
fn default_query_tokens() -> usize {
    4
}
fn default_block_segments() -> usize {
    4
}
fn default_k_edge_tokens() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub num_segments: usize,
    pub categories: Vec<CategorySpec>,
    pub num_steps: u64,
    pub retrieval_k: usize,
    pub t: u64,
    pub num_groups: usize,
    pub model: ModelConfig,
    pub cost: CostModel,
    pub tier: TierConfig,
    pub r_avg: f64,
    pub seed: u64,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_query_tokens")]
    pub query_tokens: usize,
    /// Segments per fixed block for the block-based baselines.
    #[serde(default = "default_block_segments")]
    pub block_segments: usize,
    /// Edge width, in tokens, for the fixed-position baseline.
    #[serde(default = "default_k_edge_tokens")]
    pub k_edge_tokens: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        let cat = |name: &str, count, p| CategorySpec {
            name: name.into(),
            count,
            tokens_per_segment: 8,
            update_prob_per_step: p,
        };
        Self {
            num_segments: 24,
            categories: vec![
                cat("object-state", 6, 0.30),
                cat("agent-state", 6, 0.20),
                cat("task-history", 6, 0.02),
                cat("environment-layout", 6, 0.05),
            ],
            num_steps: 24,
            retrieval_k: 12,
            t: 10,
            num_groups: 6,
            model: ModelConfig {
                num_layers: 6,
                ..ModelConfig::default()
            },
            cost: CostModel::default(),
            tier: TierConfig::default(),
            r_avg: 0.5,
            seed: 1,
            embedding_dim: default_embedding_dim(),
            query_tokens: default_query_tokens(),
            block_segments: default_block_segments(),
            k_edge_tokens: default_k_edge_tokens(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        self.model.validate()?;
        self.cost.validate()?;
        self.tier.validate()?;
        self.store_config().validate()?;
        if self.categories.iter().map(|c| c.count).sum::<usize>() != self.num_segments {
            return bad("category counts must sum to num_segments");
        }
        if self
            .categories
            .iter()
            .any(|c| !(0.0..=1.0).contains(&c.update_prob_per_step) || c.tokens_per_segment == 0)
        {
            return bad("update probabilities must lie in [0, 1] and segments need tokens");
        }
        if self.num_segments == 0 || self.num_groups > self.num_segments {
            return bad("need at least one segment and no more groups than segments");
        }
        if self.retrieval_k == 0 || self.query_tokens == 0 || self.embedding_dim == 0 || self.block_segments == 0 {
            return bad("retrieval_k, query_tokens, embedding_dim and block_segments must be positive");
        }
        if !(self.r_avg > 0.0 && self.r_avg <= 1.0) {
            return bad("r_avg must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn store_config(&self) -> StoreConfig {
        StoreConfig {
            t: self.t,
            num_groups: self.num_groups,
            seed: self.seed,
        }
    }
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum TraceEvent {
    InitSegment {
        id: SegmentId,
        category: String,
        tokens: Vec<u32>,
        embedding: Vec<f32>,
    },
    Step {
        step: u64,
    },
    Update {
        step: u64,
        id: SegmentId,
        tokens: Vec<u32>,
    },
    Query {
        step: u64,
        embedding_seed: u64,
        k: usize,
        embedding: Vec<f32>,
        tokens: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub events: Vec<TraceEvent>,
}

const EMBEDDING_NOISE: f64 = 0.6;
const QUERY_NOISE: f64 = 0.3;
const TOKEN_REDRAW_PROB: f64 = 0.5;

pub fn generate_episode(config: &EpisodeConfig) -> Result<EpisodeTrace> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, "episode");
    let dim = config.embedding_dim;
    let vocab = config.model.vocab_size as u32;

    let centers: Vec<Vec<f32>> = config
        .categories
        .iter()
        .map(|_| rng::unit_vector(&mut rng, dim))
        .collect();
    let mut labels: Vec<usize> = config
        .categories
        .iter()
        .enumerate()
        .flat_map(|(c, spec)| std::iter::repeat_n(c, spec.count))
        .collect();
    labels.shuffle(&mut rng);

    let mut events = Vec::new();
    let mut tokens: Vec<Vec<u32>> = Vec::with_capacity(labels.len());
    let mut embeddings: Vec<Vec<f32>> = Vec::with_capacity(labels.len());
    for (i, &c) in labels.iter().enumerate() {
        let spec = &config.categories[c];
        let toks: Vec<u32> = (0..spec.tokens_per_segment)
            .map(|_| rng.random_range(0..vocab))
            .collect();
        let noise = rng::normal_vec(&mut rng, dim, EMBEDDING_NOISE / (dim as f64).sqrt());
        let emb = rng::normalize(centers[c].iter().zip(&noise).map(|(a, b)| a + b).collect());
        events.push(TraceEvent::InitSegment {
            id: SegmentId(i as u32),
            category: spec.name.clone(),
            tokens: toks.clone(),
            embedding: emb.clone(),
        });
        tokens.push(toks);
        embeddings.push(emb);
    }

    for step in 1..=config.num_steps {
        events.push(TraceEvent::Step { step });
        for (i, &c) in labels.iter().enumerate() {
            let p = config.categories[c].update_prob_per_step;
            if rng.random::<f64>() < p {
                let seg = &mut tokens[i];
                let forced = rng.random_range(0..seg.len());
                for (j, t) in seg.iter_mut().enumerate() {
                    if j == forced || rng.random::<f64>() < TOKEN_REDRAW_PROB {
                        *t = rng.random_range(0..vocab);
                    }
                }
                events.push(TraceEvent::Update {
                    step,
                    id: SegmentId(i as u32),
                    tokens: seg.clone(),
                });
            }
        }
        let embedding_seed: u64 = rng.random();
        let mut qrng = rng::stream(embedding_seed, "query");
        let focus = qrng.random_range(0..labels.len());
        let noise = rng::normal_vec(&mut qrng, dim, QUERY_NOISE / (dim as f64).sqrt());
        let embedding = rng::normalize(embeddings[focus].iter().zip(&noise).map(|(a, b)| a + b).collect());
        // the query mentions some of the focus segment's tokens
        let query_tokens: Vec<u32> = (0..config.query_tokens)
            .map(|j| {
                if j % 2 == 0 {
                    tokens[focus][qrng.random_range(0..tokens[focus].len())]
                } else {
                    qrng.random_range(0..vocab)
                }
            })
            .collect();
        events.push(TraceEvent::Query {
            step,
            embedding_seed,
            k: config.retrieval_k,
            embedding,
            tokens: query_tokens,
        });
    }
    Ok(EpisodeTrace { events })
}

impl EpisodeTrace {
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut events = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TraceEvent = serde_json::from_str(&line)
                .map_err(|err| Error::Trace(format!("line {}: {err}", n + 1)))?;
            events.push(e);
        }
        let trace = Self { events };
        trace.validate()?;
        Ok(trace)
    }

    /// Steps never decrease and events only name initialized segments.
    pub fn validate(&self) -> Result<()> {
        let mut known = std::collections::BTreeSet::new();
        let mut last = 0u64;
        let mut seen_step = false;
        for (n, e) in self.events.iter().enumerate() {
            let err = |m: String| Err(Error::Trace(format!("event {}: {m}", n + 1)));
            match e {
                TraceEvent::InitSegment { id, .. } => {
                    if !known.insert(*id) {
                        return err(format!("segment {} initialized twice", id.0));
                    }
                    continue;
                }
                TraceEvent::Step { step } => {
                    if *step <= last && seen_step {
                        return err(format!("step {step} does not advance"));
                    }
                    seen_step = true;
                    last = *step;
                }
                TraceEvent::Update { step, id, tokens } => {
                    if !known.contains(id) {
                        return err(format!("update of unknown segment {}", id.0));
                    }
                    if tokens.is_empty() {
                        return err("update without tokens".into());
                    }
                    if *step < last {
                        return err(format!("step {step} goes backwards"));
                    }
                    last = *step;
                }
                TraceEvent::Query { step, k, tokens, .. } => {
                    if *k == 0 || tokens.is_empty() {
                        return err("query needs k >= 1 and tokens".into());
                    }
                    if *step < last {
                        return err(format!("step {step} goes backwards"));
                    }
                    last = *step;
                }
            }
        }
        if known.is_empty() {
            return Err(Error::Trace("trace initializes no segments".into()));
        }
        Ok(())
    }

    pub fn initial_segments(&self) -> Vec<MemorySegment> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::InitSegment {
                    id,
                    category,
                    tokens,
                    embedding,
                } => Some(MemorySegment::new(*id, category.clone(), tokens.clone(), embedding.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn num_updates(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Update { .. }))
            .count()
    }
}
