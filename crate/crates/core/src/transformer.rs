//! Deterministic toy causal transformer used as the numeric ground truth.
//!
//! Pre-norm blocks (parameter-free RMSNorm), multi-head causal attention, a
//! SiLU MLP and a separate unembedding matrix. There is no positional encoding: a
//! token's layer-0 key/value depends on the token id alone, so the only error
//! a reused KV cache can carry is missing cross-attention.
//!
//! Two independent execution routes exist. [`full_prefill`] runs every token
//! through every layer on whole matrices; [`selective_prefill`] gathers the
//! recomputed rows, merges their fresh KV with cached KV and drops rows as the
//! plan shrinks. With a full plan the two must agree.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::recompute::RecomputePlan;
use crate::rng;
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.num_heads == 0
            || self.model_dim == 0
            || self.mlp_dim == 0
            || self.vocab_size == 0
        {
            return Err(config_err("model dimensions must be positive"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(config_err("model_dim not divisible by num_heads"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Bytes of one token's key+value at one layer (f32).
    pub fn kv_bytes_per_token(&self) -> u64 {
        (self.model_dim * 2 * 4) as u64
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 32,
            mlp_dim: 64,
            vocab_size: 256,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Immutable after [`Model::new`]; share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embed: Matrix,
    layers: Vec<LayerWeights>,
    unembed: Matrix,
}

/// Keys and values of a token span at one layer, `[tokens × model_dim]` each
/// (heads laid out contiguously, `head_dim` columns apiece).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKV {
    pub layer: usize,
    pub keys: Matrix,
    pub values: Matrix,
}

impl LayerKV {
    pub fn num_tokens(&self) -> usize {
        self.keys.rows()
    }

    pub fn slice_tokens(&self, start: usize, end: usize) -> LayerKV {
        LayerKV {
            layer: self.layer,
            keys: self.keys.slice_rows(start, end),
            values: self.values.slice_rows(start, end),
        }
    }
}

/// Segment-level attention mass at one layer.
///
/// Head-averaged probabilities, summed over destination tokens of a segment
/// and averaged over the source tokens that were computed at this layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub layer: usize,
    pub query_to_segment: Vec<f32>,
    /// `[i][j]`: from segment `i` onto earlier segment `j`; zero when `j >= i`.
    pub segment_to_segment: Vec<Vec<f32>>,
}

impl AttentionSummary {
    pub fn num_segments(&self) -> usize {
        self.query_to_segment.len()
    }
}

/// Output-side state used for divergence: the tail rows (query tokens, or the
/// last layout token when the query is empty), the last row, and its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalState {
    pub hidden: Matrix,
    pub logits: Vec<f32>,
}

impl FinalState {
    pub fn last_hidden(&self) -> &[f32] {
        self.hidden.row(self.hidden.rows() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub final_state: FinalState,
    /// One entry per layer over every token (layout then query).
    pub kv: Vec<LayerKV>,
    pub attn: Vec<AttentionSummary>,
}

#[derive(Debug, Clone)]
pub struct SelectiveOutput {
    pub final_state: FinalState,
    pub merged_kv: Vec<LayerKV>,
    pub attn: Vec<AttentionSummary>,
    pub plan: RecomputePlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub l2: f64,
    pub kl: f64,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let std = (d as f64).powf(-0.5);
        let init = |name: &str, rows: usize, cols: usize| {
            let mut s = rng::stream(config.seed, name);
            Matrix::from_vec(rows, cols, rng::normal_vec(&mut s, rows * cols, std))
        };
        let embed = init("embed", config.vocab_size, d);
        let layers = (0..config.num_layers)
            .map(|l| LayerWeights {
                wq: init(&format!("layer{l}.wq"), d, d),
                wk: init(&format!("layer{l}.wk"), d, d),
                wv: init(&format!("layer{l}.wv"), d, d),
                wo: init(&format!("layer{l}.wo"), d, d),
                w1: init(&format!("layer{l}.w1"), d, config.mlp_dim),
                w2: init(&format!("layer{l}.w2"), config.mlp_dim, d),
            })
            .collect();
        let unembed = init("unembed", d, config.vocab_size);
        Ok(Self {
            config,
            embed,
            layers,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn layer_weights(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token {t} out of vocab range {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embedding(&self, token: u32) -> &[f32] {
        self.embed.row(token as usize)
    }

    fn project_kv(&self, layer: usize, normed: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let w = &self.layers[layer];
        (tensor::vecmat(normed, &w.wk), tensor::vecmat(normed, &w.wv))
    }

    /// Causal attention of one query row over `keys[0..upto]`; returns the
    /// concatenated head outputs and the head-averaged probabilities.
    fn attend(&self, q: &[f32], keys: &Matrix, values: &Matrix, upto: usize) -> (Vec<f32>, Vec<f32>) {
        let h = self.config.num_heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = vec![0.0f32; self.config.model_dim];
        let mut mean_p = vec![0.0f32; upto];
        let mut scores = vec![0.0f32; upto];
        for head in 0..h {
            let cols = head * hd..(head + 1) * hd;
            let qh = &q[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = tensor::dot(qh, &keys.row(j)[cols.clone()]) * scale;
            }
            tensor::softmax_in_place(&mut scores);
            let oh = &mut out[cols.clone()];
            for (j, &p) in scores.iter().enumerate() {
                for (o, v) in oh.iter_mut().zip(&values.row(j)[cols.clone()]) {
                    *o += p * v;
                }
                mean_p[j] += p;
            }
        }
        for p in mean_p.iter_mut() {
            *p /= h as f32;
        }
        (out, mean_p)
    }

    /// Residual attention output projection plus the MLP block.
    fn finish_row(&self, layer: usize, x: &[f32], attn_out: &[f32]) -> Vec<f32> {
        let w = &self.layers[layer];
        let proj = tensor::vecmat(attn_out, &w.wo);
        let h: Vec<f32> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let mut up = tensor::vecmat(&tensor::rms_norm(&h), &w.w1);
        for u in up.iter_mut() {
            *u = tensor::silu(*u);
        }
        let down = tensor::vecmat(&up, &w.w2);
        h.iter().zip(&down).map(|(a, b)| a + b).collect()
    }

    fn logits(&self, last_hidden: &[f32]) -> Vec<f32> {
        tensor::vecmat(&tensor::rms_norm(last_hidden), &self.unembed)
    }
}

/// Token-position bookkeeping for a layout followed by a query.
#[derive(Debug, Clone)]
struct Positions {
    /// `offsets[s]..offsets[s+1]` are segment `s`'s tokens; the last entry is
    /// where the query starts.
    offsets: Vec<usize>,
    total: usize,
}

impl Positions {
    fn new(layout: &[Vec<u32>], query_len: usize) -> Self {
        let mut offsets = Vec::with_capacity(layout.len() + 1);
        let mut acc = 0;
        for seg in layout {
            offsets.push(acc);
            acc += seg.len();
        }
        offsets.push(acc);
        Self {
            offsets,
            total: acc + query_len,
        }
    }

    fn num_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    fn query_start(&self) -> usize {
        self.offsets[self.num_segments()]
    }

    fn segment_range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    /// Segment owning token `t`, or `None` for query tokens.
    fn segment_of(&self, t: usize) -> Option<usize> {
        if t >= self.query_start() {
            return None;
        }
        Some(self.offsets.partition_point(|&o| o <= t) - 1)
    }
}

/// Accumulates head-averaged attention rows into an [`AttentionSummary`].
struct SummaryBuilder<'a> {
    pos: &'a Positions,
    layer: usize,
    s2s: Vec<Vec<f64>>,
    rows_per_segment: Vec<usize>,
    q2s: Vec<f64>,
    query_rows: usize,
}

impl<'a> SummaryBuilder<'a> {
    fn new(pos: &'a Positions, layer: usize) -> Self {
        let s = pos.num_segments();
        Self {
            pos,
            layer,
            s2s: vec![vec![0.0; s]; s],
            rows_per_segment: vec![0; s],
            q2s: vec![0.0; s],
            query_rows: 0,
        }
    }

    fn add_row(&mut self, source: usize, probs: &[f32]) {
        let mass = |seg: usize| -> f64 {
            let r = self.pos.segment_range(seg);
            probs[r.start..r.end.min(probs.len())]
                .iter()
                .map(|&p| p as f64)
                .sum()
        };
        match self.pos.segment_of(source) {
            Some(si) => {
                for sj in 0..si {
                    self.s2s[si][sj] += mass(sj);
                }
                self.rows_per_segment[si] += 1;
            }
            None => {
                for sj in 0..self.pos.num_segments() {
                    self.q2s[sj] += mass(sj);
                }
                self.query_rows += 1;
            }
        }
    }

    fn finish(self) -> AttentionSummary {
        let clamp = |x: f64| x.clamp(0.0, 1.0) as f32;
        let segment_to_segment = self
            .s2s
            .iter()
            .zip(&self.rows_per_segment)
            .map(|(row, &n)| {
                row.iter()
                    .map(|&v| if n == 0 { 0.0 } else { clamp(v / n as f64) })
                    .collect()
            })
            .collect();
        let query_to_segment = self
            .q2s
            .iter()
            .map(|&v| {
                if self.query_rows == 0 {
                    0.0
                } else {
                    clamp(v / self.query_rows as f64)
                }
            })
            .collect();
        AttentionSummary {
            layer: self.layer,
            query_to_segment,
            segment_to_segment,
        }
    }
}

fn check_layout(model: &Model, layout: &[Vec<u32>], query: &[u32]) -> Result<()> {
    for seg in layout {
        model.check_tokens(seg)?;
    }
    model.check_tokens(query)
}

fn final_state(model: &Model, rows: Vec<Vec<f32>>) -> FinalState {
    let d = model.config.model_dim;
    let hidden = Matrix::from_rows(d, rows.iter().map(|r| r.as_slice()));
    let logits = model.logits(hidden.row(hidden.rows() - 1));
    FinalState { hidden, logits }
}

/// Reference route: every token at every layer over the whole concatenation.
pub fn full_prefill(model: &Model, layout: &[Vec<u32>], query: &[u32]) -> Result<PrefillOutput> {
    full_prefill_layers(model, layout, query, model.num_layers())
}

/// Fresh KV at `layer` with every earlier layer fully recomputed.
pub fn fresh_kv_at(model: &Model, layout: &[Vec<u32>], query: &[u32], layer: usize) -> Result<LayerKV> {
    if layer >= model.num_layers() {
        return Err(Error::Input(format!("layer {layer} out of range")));
    }
    let out = full_prefill_layers(model, layout, query, layer + 1)?;
    Ok(out.kv.into_iter().next_back().expect("at least one layer"))
}

fn full_prefill_layers(
    model: &Model,
    layout: &[Vec<u32>],
    query: &[u32],
    num_layers: usize,
) -> Result<PrefillOutput> {
    if layout.is_empty() {
        return Err(Error::Input("layout must contain at least one segment".into()));
    }
    check_layout(model, layout, query)?;
    let pos = Positions::new(layout, query.len());
    if pos.total == 0 {
        return Err(Error::Input("no tokens to prefill".into()));
    }
    let d = model.config.model_dim;
    let tokens: Vec<u32> = layout.iter().flatten().chain(query).copied().collect();
    let mut x = Matrix::from_rows(d, tokens.iter().map(|&t| model.embedding(t)));
    let mut kv = Vec::with_capacity(num_layers);
    let mut attn = Vec::with_capacity(num_layers);

    for layer in 0..num_layers {
        let w = model.layer_weights(layer);
        let normed_rows: Vec<Vec<f32>> = (0..pos.total).map(|t| tensor::rms_norm(x.row(t))).collect();
        let normed = Matrix::from_rows(d, normed_rows.iter().map(|r| r.as_slice()));
        let q = tensor::matmul(&normed, &w.wq);
        let k = tensor::matmul(&normed, &w.wk);
        let v = tensor::matmul(&normed, &w.wv);
        let mut summary = SummaryBuilder::new(&pos, layer);
        let mut next = Matrix::zeros(pos.total, d);
        for t in 0..pos.total {
            let (out, probs) = model.attend(q.row(t), &k, &v, t + 1);
            summary.add_row(t, &probs);
            next.row_mut(t).copy_from_slice(&model.finish_row(layer, x.row(t), &out));
        }
        attn.push(summary.finish());
        kv.push(LayerKV {
            layer,
            keys: k,
            values: v,
        });
        x = next;
    }

    let tail: Vec<Vec<f32>> = if query.is_empty() {
        vec![x.row(pos.total - 1).to_vec()]
    } else {
        (pos.query_start()..pos.total).map(|t| x.row(t).to_vec()).collect()
    };
    Ok(PrefillOutput {
        final_state: final_state(model, tail),
        kv,
        attn,
    })
}

/// Standalone KV of one segment, as if it were the whole context.
pub fn segment_prefill(model: &Model, segment: &[u32]) -> Result<Vec<LayerKV>> {
    if segment.is_empty() {
        return Err(Error::Input("segment must be non-empty".into()));
    }
    Ok(full_prefill(model, &[segment.to_vec()], &[])?.kv)
}

/// Joint KV of consecutive segments computed with full cross-attention among
/// them, sliced back per segment.
pub fn group_prefill(model: &Model, members: &[Vec<u32>]) -> Result<Vec<Vec<LayerKV>>> {
    if members.iter().any(|m| m.is_empty()) {
        return Err(Error::Input("group member must be non-empty".into()));
    }
    let kv = full_prefill(model, members, &[])?.kv;
    let mut out = Vec::with_capacity(members.len());
    let mut start = 0;
    for m in members {
        let end = start + m.len();
        out.push(kv.iter().map(|l| l.slice_tokens(start, end)).collect());
        start = end;
    }
    Ok(out)
}

/// Decides which segments are recomputed at each layer while a selective
/// prefill runs. `next_layer` sees the attention of the layer just computed.
pub trait LayerPlanner {
    fn first_layer(&mut self, num_segments: usize) -> Result<BTreeSet<usize>>;

    fn next_layer(
        &mut self,
        computed_layer: usize,
        attn: &AttentionSummary,
        current: &BTreeSet<usize>,
    ) -> Result<BTreeSet<usize>>;
}

/// Replays a precomputed plan.
pub struct FixedPlanner<'a>(pub &'a RecomputePlan);

impl LayerPlanner for FixedPlanner<'_> {
    fn first_layer(&mut self, _num_segments: usize) -> Result<BTreeSet<usize>> {
        self.0
            .layer(0)
            .cloned()
            .ok_or_else(|| Error::Plan("plan has no layers".into()))
    }

    fn next_layer(
        &mut self,
        computed_layer: usize,
        _attn: &AttentionSummary,
        _current: &BTreeSet<usize>,
    ) -> Result<BTreeSet<usize>> {
        self.0
            .layer(computed_layer + 1)
            .cloned()
            .ok_or_else(|| Error::Plan(format!("plan has no layer {}", computed_layer + 1)))
    }
}

/// Cached per-segment KV: `cached[s]` holds one [`LayerKV`] per layer.
pub type CachedKv = [Option<Vec<LayerKV>>];

pub fn selective_prefill(
    model: &Model,
    layout: &[Vec<u32>],
    cached: &CachedKv,
    plan: &RecomputePlan,
    query: &[u32],
) -> Result<SelectiveOutput> {
    if plan.num_layers() != model.num_layers() {
        return Err(Error::Plan(format!(
            "plan has {} layers, model has {}",
            plan.num_layers(),
            model.num_layers()
        )));
    }
    plan.validate(layout.len())?;
    run_selective(model, layout, cached, query, &mut FixedPlanner(plan))
}

/// Layer-by-layer execution driven by a [`LayerPlanner`].
pub fn run_selective(
    model: &Model,
    layout: &[Vec<u32>],
    cached: &CachedKv,
    query: &[u32],
    planner: &mut dyn LayerPlanner,
) -> Result<SelectiveOutput> {
    if layout.is_empty() {
        return Err(Error::Input("layout must contain at least one segment".into()));
    }
    if query.is_empty() {
        return Err(Error::Input("selective prefill needs a non-empty query".into()));
    }
    if cached.len() != layout.len() {
        return Err(Error::Input(format!(
            "cached KV covers {} segments, layout has {}",
            cached.len(),
            layout.len()
        )));
    }
    check_layout(model, layout, query)?;
    let pos = Positions::new(layout, query.len());
    let s = layout.len();
    let d = model.config.model_dim;
    let num_layers = model.num_layers();

    let check_set = |set: &BTreeSet<usize>| -> Result<()> {
        match set.iter().next_back() {
            Some(&m) if m >= s => Err(Error::Plan(format!("plan references unknown segment {m}"))),
            _ => Ok(()),
        }
    };

    let mut current = planner.first_layer(s)?;
    check_set(&current)?;
    let mut plan_layers = Vec::with_capacity(num_layers);

    // Hidden state of every live row; rows of dropped segments become `None`.
    let mut hidden: Vec<Option<Vec<f32>>> = vec![None; pos.total];
    for seg in &current {
        for t in pos.segment_range(*seg) {
            hidden[t] = Some(model.embedding(layout[*seg][t - pos.offsets[*seg]]).to_vec());
        }
    }
    for (i, t) in (pos.query_start()..pos.total).enumerate() {
        hidden[t] = Some(model.embedding(query[i]).to_vec());
    }

    let mut merged_kv = Vec::with_capacity(num_layers);
    let mut attn = Vec::with_capacity(num_layers);

    for layer in 0..num_layers {
        let w = model.layer_weights(layer);
        let mut keys = Matrix::zeros(pos.total, d);
        let mut values = Matrix::zeros(pos.total, d);
        let mut queries: Vec<Option<Vec<f32>>> = vec![None; pos.total];

        for seg in 0..s {
            let range = pos.segment_range(seg);
            if current.contains(&seg) {
                continue;
            }
            let seg_kv = cached[seg]
                .as_ref()
                .ok_or_else(|| Error::CacheMiss(format!("segment {seg} has no cached KV")))?;
            let lkv = seg_kv.get(layer).ok_or_else(|| {
                Error::CacheMiss(format!("segment {seg} has no cached KV at layer {layer}"))
            })?;
            if lkv.num_tokens() != range.len() {
                return Err(Error::Shape(format!(
                    "cached KV of segment {seg} has {} tokens, segment has {}",
                    lkv.num_tokens(),
                    range.len()
                )));
            }
            for (i, t) in range.enumerate() {
                keys.row_mut(t).copy_from_slice(lkv.keys.row(i));
                values.row_mut(t).copy_from_slice(lkv.values.row(i));
            }
        }
        for (t, h) in hidden.iter().enumerate() {
            if let Some(h) = h {
                let normed = tensor::rms_norm(h);
                let (k, v) = model.project_kv(layer, &normed);
                keys.row_mut(t).copy_from_slice(&k);
                values.row_mut(t).copy_from_slice(&v);
                queries[t] = Some(tensor::vecmat(&normed, &w.wq));
            }
        }

        let mut summary = SummaryBuilder::new(&pos, layer);
        let mut next: Vec<Option<Vec<f32>>> = vec![None; pos.total];
        for t in 0..pos.total {
            let (Some(q), Some(x)) = (&queries[t], &hidden[t]) else {
                continue;
            };
            let (out, probs) = model.attend(q, &keys, &values, t + 1);
            summary.add_row(t, &probs);
            next[t] = Some(model.finish_row(layer, x, &out));
        }
        let layer_attn = summary.finish();
        merged_kv.push(LayerKV {
            layer,
            keys,
            values,
        });
        plan_layers.push(current.clone());

        if layer + 1 < num_layers {
            let upcoming = planner.next_layer(layer, &layer_attn, &current)?;
            check_set(&upcoming)?;
            if !upcoming.is_subset(&current) {
                return Err(Error::Plan(format!(
                    "layer {} plan is not a subset of layer {layer}",
                    layer + 1
                )));
            }
            for seg in current.difference(&upcoming) {
                for t in pos.segment_range(*seg) {
                    next[t] = None;
                }
            }
            current = upcoming;
        }
        attn.push(layer_attn);
        hidden = next;
    }

    let tail: Vec<Vec<f32>> = (pos.query_start()..pos.total)
        .map(|t| hidden[t].clone().expect("query rows are always live"))
        .collect();
    Ok(SelectiveOutput {
        final_state: final_state(model, tail),
        merged_kv,
        attn,
        plan: RecomputePlan::new(plan_layers),
    })
}

fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// L2 distance of last-token hidden states and symmetric KL of the softmaxed
/// last-token logits.
pub fn divergence(a: &FinalState, b: &FinalState) -> Result<Divergence> {
    if a.hidden.cols() != b.hidden.cols() || a.logits.len() != b.logits.len() {
        return Err(Error::Shape(format!(
            "final states differ in shape: {}x{} vs {}x{}",
            a.hidden.rows(),
            a.hidden.cols(),
            b.hidden.rows(),
            b.hidden.cols()
        )));
    }
    let l2 = tensor::l2_distance(a.last_hidden(), b.last_hidden());
    let p = softmax_f64(&a.logits);
    let q = softmax_f64(&b.logits);
    let kl = p
        .iter()
        .zip(&q)
        .map(|(pi, qi)| (pi - qi) * (pi.ln() - qi.ln()))
        .sum::<f64>()
        .max(0.0);
    Ok(Divergence { l2, kl })
}
