//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line regardless of outcome.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use kvmem_core::pipeline::{simulate_balanced, simulate_overlap, simulate_sequential, validate_timeline, LayerWork};
use kvmem_core::recompute::{
    converge, execute_keep, plan_deviation, plan_fixed_position, plan_full_reuse, plan_keep, ratio_schedule,
    run_strategy,
};
use kvmem_core::transformer::{full_prefill, segment_prefill, AttentionSummary, LayerKV, Model, ModelConfig};
use kvmem_core::episode::generate_episode;
use kvmem_core::*;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

struct Instance {
    model: Model,
    layout: Vec<Vec<u32>>,
    query: Vec<u32>,
    cached: Vec<Option<Vec<LayerKV>>>,
}

fn instance(seed: u64) -> Instance {
    let model = Model::new(ModelConfig {
        num_layers: 4,
        num_heads: 4,
        model_dim: 32,
        mlp_dim: 64,
        vocab_size: 256,
        seed,
    })
    .unwrap();
    let mut r = rng::stream(seed, "instance");
    let layout: Vec<Vec<u32>> = (0..8)
        .map(|_| {
            let n = r.random_range(4..10);
            (0..n).map(|_| r.random_range(0..256)).collect()
        })
        .collect();
    let query = (0..4).map(|_| r.random_range(0..256)).collect();
    let cached = layout
        .iter()
        .map(|seg| Some(segment_prefill(&model, seg).unwrap()))
        .collect();
    Instance {
        model,
        layout,
        query,
        cached,
    }
}

const SEEDS: std::ops::Range<u64> = 0..20;

fn oracle_degeneracy() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f32;
    for seed in SEEDS {
        let inst = instance(seed);
        let sched = ratio_schedule(4, 1.0).map_err(|e| e.to_string())?;
        let keep = execute_keep(&inst.model, &inst.layout, &inst.cached, &inst.query, &sched, true)
            .map_err(|e| e.to_string())?;
        let full = full_prefill(&inst.model, &inst.layout, &inst.query).map_err(|e| e.to_string())?;
        let (a, b) = (&keep.final_state.hidden, &full.final_state.hidden);
        if a.rows() != b.rows() || a.cols() != b.cols() {
            return Err(format!("seed {seed}: shape mismatch"));
        }
        for r in 0..a.rows() {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max-abs {worst:.3e} over 20 seeds in {secs:.2} s");
    if worst <= 1e-6 && secs < 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sandwich() -> Outcome {
    let mut bad = Vec::new();
    for seed in SEEDS {
        let inst = instance(seed);
        let run = |plan| run_strategy(&inst.model, &inst.layout, &inst.cached, &inst.query, plan).unwrap().divergence;
        let sched = ratio_schedule(4, 0.5).unwrap();
        let plans = [
            RecomputePlan::full(4, 8),
            plan_keep(&inst.model, &inst.layout, &inst.cached, &inst.query, &sched).unwrap(),
            plan_full_reuse(4),
        ];
        let [full, keep, reuse] = plans.each_ref().map(run);
        let ok = full.l2 <= 1e-6
            && full.kl <= 1e-9
            && full.l2 <= keep.l2
            && keep.l2 <= reuse.l2
            && keep.kl <= reuse.kl;
        if !ok {
            bad.push(format!(
                "seed {seed} (l2 keep {:.4} reuse {:.4}, kl keep {:.5} reuse {:.5})",
                keep.l2, reuse.l2, keep.kl, reuse.kl
            ));
        }
    }
    if bad.is_empty() {
        Ok("0 <= keep <= full-reuse on all 20 seeds".into())
    } else {
        Err(format!("{} of 20 seeds out of order: {}", bad.len(), bad.join("; ")))
    }
}

/// First seed of the engine instance family satisfying the witness
/// conditions, found by scanning seeds upward.
const WITNESS_SEED: u64 = 1;

fn witness() -> Outcome {
    let inst = instance(WITNESS_SEED);
    let sched = ratio_schedule(4, 0.5).unwrap();
    let keep = plan_keep(&inst.model, &inst.layout, &inst.cached, &inst.query, &sched).unwrap();
    let dev = plan_deviation(&inst.model, &inst.layout, &inst.cached, &inst.query, &sched).unwrap();
    let lens: Vec<usize> = inst.layout.iter().map(Vec::len).collect();
    let fixed = plan_fixed_position(&lens, &[0..lens.len()], &sched, 4).unwrap();
    let pivots: Vec<(usize, usize)> = (0..4)
        .flat_map(|l| {
            keep.layers()[l]
                .iter()
                .filter(|&&s| !dev.contains(l, s) && !fixed.contains(l, s))
                .map(move |&s| (l, s))
                .collect::<Vec<_>>()
        })
        .collect();
    let run = |plan| run_strategy(&inst.model, &inst.layout, &inst.cached, &inst.query, plan).unwrap().divergence;
    let (dk, dd) = (run(&keep), run(&dev));
    let detail = format!(
        "seed {WITNESS_SEED}: (layer, segment) only in keep {pivots:?}; l2 keep {:.4} vs deviation {:.4}",
        dk.l2, dd.l2
    );
    if !pivots.is_empty() && dk.l2 < dd.l2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Direct evaluation of the propagation rule: seed with the top query
/// score, then repeatedly score each unselected segment by its mean attention
/// from the selected ones and take the best positive one.
fn hand_converge(q: &[f64], a: &[Vec<f64>], budget: usize) -> (Vec<usize>, usize) {
    let n = q.len();
    let argmax = |scores: &[f64], skip: &[usize]| {
        let mut best: Option<usize> = None;
        for s in 0..n {
            if skip.contains(&s) {
                continue;
            }
            if best.is_none_or(|b| scores[s] > scores[b]) {
                best = Some(s);
            }
        }
        best
    };
    let mut sel = vec![argmax(q, &[]).unwrap()];
    let mut hops = 1;
    while sel.len() < budget && hops < n {
        hops += 1;
        let scores: Vec<f64> = (0..n)
            .map(|s| sel.iter().map(|&m| a[m][s]).sum::<f64>() / sel.len() as f64)
            .collect();
        match argmax(&scores, &sel) {
            Some(s) if scores[s] > 0.0 => sel.push(s),
            _ => break,
        }
    }
    (sel, hops)
}

fn propagation_trace() -> Outcome {
    let q = [0.05, 0.10, 0.15, 0.70];
    let a = [
        [0.0, 0.0, 0.0, 0.0],
        [0.80, 0.0, 0.0, 0.0],
        [0.30, 0.40, 0.0, 0.0],
        [0.10, 0.75, 0.10, 0.0],
    ];
    let (hand, hand_hops) = hand_converge(&q, &a.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 3);
    let summary = AttentionSummary {
        layer: 0,
        query_to_segment: q.iter().map(|&x| x as f32).collect(),
        segment_to_segment: a.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect(),
    };
    let st = converge(&summary, 3);
    let detail = format!(
        "engine {:?} in {} hops, hand evaluation {hand:?} in {hand_hops} hops",
        st.relevant, st.hop
    );
    if st.relevant == hand && st.hop == hand_hops && st.relevant == [3, 1, 0] && st.hop == 3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn item(owner: usize, layer: usize, tu: f64) -> LoadItem {
    LoadItem {
        owner,
        layer,
        bytes: (tu * 1024.0) as u64,
        tu,
        members: vec![owner],
    }
}

fn fixture(plan: Vec<BTreeSet<usize>>, loads: Vec<Vec<LoadItem>>) -> Workload {
    Workload {
        attention_fraction: 0.5,
        adaptive: false,
        plan,
        layers: loads
            .into_iter()
            .map(|loads| LayerWork {
                compute_tu: 4.0,
                eval_tu: 0.0,
                loads,
            })
            .collect(),
    }
}

/// Sequential makespan by hand: every load, eval and compute back to back.
fn hand_sequential(w: &Workload) -> f64 {
    let n = w.layers.len();
    w.layers
        .iter()
        .enumerate()
        .map(|(l, lw)| lw.compute_tu + lw.load_tu() + if l + 1 < n { lw.eval_tu } else { 0.0 })
        .sum()
}

fn fuzz_workload(r: &mut impl Rng) -> Workload {
    let layers = r.random_range(1..7);
    let segs = r.random_range(1..9);
    let adaptive = r.random_bool(0.5);
    let mut plan = vec![(0..segs).filter(|_| r.random_bool(0.7)).collect::<BTreeSet<usize>>()];
    for _ in 1..layers {
        let prev = plan.last().unwrap().clone();
        plan.push(prev.into_iter().filter(|_| r.random_bool(0.7)).collect());
    }
    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut s = 0;
    while s < segs {
        let w = r.random_range(1..4).min(segs - s);
        units.push((s..s + w).collect());
        s += w;
    }
    let slow: Vec<bool> = units.iter().map(|_| r.random_bool(0.6)).collect();
    let layers = (0..layers)
        .map(|l| LayerWork {
            compute_tu: r.random_range(0.2..6.0),
            eval_tu: if adaptive { r.random_range(0.0..1.5) } else { 0.0 },
            loads: units
                .iter()
                .enumerate()
                .filter(|(u, m)| slow[*u] && m.iter().any(|x| !plan[l].contains(x)))
                .map(|(u, m)| LoadItem {
                    owner: u,
                    layer: l,
                    bytes: 1,
                    tu: r.random_range(0.1..4.0),
                    members: m.clone(),
                })
                .collect(),
        })
        .collect();
    Workload {
        attention_fraction: r.random_range(0.0..=1.0),
        adaptive,
        plan,
        layers,
    }
}

fn schedule_dominance() -> Outcome {
    let light = fixture(
        vec![BTreeSet::new(); 3],
        vec![vec![], vec![item(0, 1, 2.0)], vec![item(0, 2, 3.0)]],
    );
    let heavy = fixture(
        vec![[0, 1].into(), [1].into(), BTreeSet::new()],
        vec![vec![], vec![item(0, 1, 2.0)], vec![item(0, 2, 2.0), item(1, 2, 4.0)]],
    );
    let spans = |w: &Workload| {
        [
            simulate_sequential(w).unwrap().makespan_tu,
            simulate_overlap(w).unwrap().makespan_tu,
            simulate_balanced(w).unwrap().makespan_tu,
        ]
    };
    let (a, b) = (spans(&light), spans(&heavy));
    if a != [17.0, 12.0, 12.0] || a[0] != hand_sequential(&light) {
        return Err(format!("light fixture gave {a:?}"));
    }
    if b != [hand_sequential(&heavy), 14.0, 12.0] {
        return Err(format!("heavy fixture gave {b:?}"));
    }

    let mut r = rng::stream(7, "fuzz");
    let cases = 2000;
    for case in 0..cases {
        let w = fuzz_workload(&mut r);
        let tls = [
            simulate_sequential(&w),
            simulate_overlap(&w),
            simulate_balanced(&w),
        ];
        let mut m = [0.0; 3];
        for (i, tl) in tls.into_iter().enumerate() {
            let tl = tl.map_err(|e| format!("case {case}: {e}"))?;
            let v = validate_timeline(&tl, &w);
            if !v.is_empty() {
                return Err(format!("case {case}: {v:?}"));
            }
            m[i] = tl.makespan_tu;
        }
        if (m[0] - hand_sequential(&w)).abs() > 1e-9 {
            return Err(format!("case {case}: sequential {} vs hand sum {}", m[0], hand_sequential(&w)));
        }
        if m[2] > m[1] + 1e-9 || m[1] > m[0] + 1e-9 {
            return Err(format!("case {case}: makespans {m:?}"));
        }
    }
    Ok(format!(
        "fixtures {a:?} and {b:?}; {cases} fuzzed workloads ordered and valid"
    ))
}

fn seg(id: u32, tokens: usize, emb: Vec<f32>) -> MemorySegment {
    MemorySegment::new(SegmentId(id), "obj", vec![1; tokens], emb)
}

fn invalidation_accounting() -> Outcome {
    let t = StoreConfig::default().t;
    if t != 10 || EpisodeConfig::default().t != 10 {
        return Err(format!("default stability window is {t}"));
    }
    let cfg = StoreConfig {
        t,
        num_groups: 2,
        seed: 0,
    };
    let segs = vec![
        seg(0, 10, vec![1.0, 0.0]),
        seg(1, 12, vec![-1.0, 0.0]),
        seg(2, 8, vec![0.8, 0.6]),
        seg(3, 5, vec![-0.8, 0.6]),
    ];
    let mut store = MemoryStore::new(cfg, segs, 0).map_err(|e| e.to_string())?;
    let g_a = store.group_of(SegmentId(0)).unwrap();
    let g_b = store.group_of(SegmentId(1)).unwrap();
    if g_a != store.group_of(SegmentId(2)).unwrap() || g_b != store.group_of(SegmentId(3)).unwrap() {
        return Err("unexpected clustering".into());
    }

    let mut cache = CacheManager::new(TierConfig::default()).unwrap();
    let model = Model::new(ModelConfig {
        num_layers: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let put_segment = |cache: &mut CacheManager, id: u32, len: usize| {
        for kv in segment_prefill(&model, &vec![1; len]).unwrap() {
            cache.put(KVBlock::new(KvOwner::Segment(SegmentId(id)), 0, kv));
        }
    };
    for (id, len) in [(0, 10), (1, 12), (2, 8), (3, 5)] {
        put_segment(&mut cache, id, len);
    }

    // group B keeps changing, group A goes quiet
    store.apply_update(SegmentId(1), vec![2; 12], 1).unwrap();
    let rec = store.apply_update(SegmentId(3), vec![2; 5], 2).unwrap();
    let dropped = cache.invalidate(&rec);
    if rec.total_tokens() != 5 || dropped != 5 || rec.entries.len() != 1 {
        return Err(format!(
            "dynamic update invalidated {} tokens ({dropped} in cache)",
            rec.total_tokens()
        ));
    }
    if store.group(g_a).unwrap().state != GroupState::Dynamic {
        return Err("group flipped before the window".into());
    }
    let early = store.advance_step(t - 1).unwrap();
    if !early.is_empty() {
        return Err(format!("flip after {} quiet steps", t - 1));
    }
    let flips = store.advance_step(t).unwrap();
    if flips.len() != 1 || flips[0].group != g_a || store.group(g_a).unwrap().state != GroupState::Static {
        return Err(format!("expected group A static at step {t}, got {flips:?}"));
    }
    if store.group(g_b).unwrap().state != GroupState::Dynamic {
        return Err("recently updated group flipped".into());
    }

    let joint = full_prefill(&model, &[vec![1; 10], vec![1; 8]], &[]).unwrap().kv;
    for kv in joint {
        cache.put(KVBlock::new(KvOwner::Group(g_a), flips[0].version, kv));
    }
    let rec = store.apply_update(SegmentId(2), vec![3; 8], t + 1).unwrap();
    let dropped = cache.invalidate(&rec);
    let group_tokens = 18;
    if rec.total_tokens() != group_tokens || dropped != group_tokens as u64 {
        return Err(format!(
            "static update invalidated {} tokens ({dropped} in cache), group has {group_tokens}",
            rec.total_tokens()
        ));
    }
    if store.group(g_a).unwrap().state != GroupState::Dynamic {
        return Err("static group stayed static after an update".into());
    }
    store.check_invariants().map_err(|e| e.to_string())?;
    Ok(format!("dynamic 5 tokens, static group 18 tokens, flip at quiet step {t}"))
}

fn update_heavy(seed: u64) -> EpisodeConfig {
    let mut c = EpisodeConfig {
        num_segments: 48,
        num_groups: 12,
        seed,
        ..EpisodeConfig::default()
    };
    for cat in &mut c.categories {
        cat.count = 12;
    }
    c
}

/// Least-squares slope of y on x.
fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn trend() -> Outcome {
    let specs = [
        StrategySpec::new(Strategy::Full),
        StrategySpec::new(Strategy::Deviation),
        StrategySpec::new(Strategy::Keep),
    ];
    let sweep = Sweep::K(vec![10, 20, 40]);
    let mut lines = Vec::new();
    let mut bad = Vec::new();
    for seed in 0..10 {
        let cfg = update_heavy(seed);
        let trace = generate_episode(&cfg).map_err(|e| e.to_string())?;
        let reports = compare(&trace, &specs, &sweep, &cfg).map_err(|e| e.to_string())?;
        let slopes: Vec<f64> = reports
            .chunks(3)
            .map(|rows| {
                slope(
                    &rows
                        .iter()
                        .map(|r| (r.summary.mean_realized_segments, r.summary.mean_ttft_tu))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let [full, dev, keep] = [slopes[0], slopes[1], slopes[2]];
        lines.push(format!("{keep:.3}/{dev:.3}/{full:.3}"));
        if !(keep < full && keep < dev) {
            bad.push(seed);
        }
    }
    let detail = format!("keep/deviation/full slopes per seed: {}", lines.join(" "));
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("seeds {bad:?} out of order; {detail}"))
    }
}

fn inversions(values: &[f64], increasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if increasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

fn ratio_sweep() -> Outcome {
    let rs = vec![0.2, 0.4, 0.6, 0.8, 1.0];
    let mut bad = Vec::new();
    let mut total = 0;
    for seed in 0..10 {
        let cfg = EpisodeConfig {
            retrieval_k: 20,
            ..update_heavy(seed)
        };
        let trace = generate_episode(&cfg).map_err(|e| e.to_string())?;
        let reports = compare(&trace, &[StrategySpec::new(Strategy::Keep)], &Sweep::R(rs.clone()), &cfg)
            .map_err(|e| e.to_string())?;
        let div: Vec<f64> = reports.iter().map(|r| r.summary.mean_div_l2).collect();
        let ttft: Vec<f64> = reports.iter().map(|r| r.summary.mean_ttft_tu).collect();
        let inv = inversions(&div, false) + inversions(&ttft, true);
        total += inv;
        if inv > 1 {
            bad.push(format!("seed {seed} div {div:.4?} ttft {ttft:.3?}"));
        }
    }
    if bad.is_empty() {
        Ok(format!("10 seeds, {total} inversions in total, at most one per seed"))
    } else {
        Err(bad.join("; "))
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/compare.csv")
}

fn determinism() -> Outcome {
    let cfg = EpisodeConfig {
        num_steps: 6,
        ..EpisodeConfig::default()
    };
    let specs: Vec<StrategySpec> = Strategy::ALL.iter().map(|&s| StrategySpec::new(s)).collect();
    let run = || {
        let trace = generate_episode(&cfg).unwrap();
        let reports = compare(&trace, &specs, &Sweep::None, &cfg).unwrap();
        let json: Vec<String> = reports.iter().map(|r| r.to_json().unwrap()).collect();
        (trace.to_jsonl(), json, to_csv(&reports))
    };
    let (first, second) = (run(), run());
    if first != second {
        return Err("two identical runs produced different bytes".into());
    }
    let path = golden_path();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &first.2).unwrap();
    }
    let golden = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if golden != first.2 {
        return Err(format!("CSV differs from {}", path.display()));
    }
    Ok(format!("trace, reports and CSV byte-identical; CSV matches {}", path.display()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle degeneracy", oracle_degeneracy),
        ("sandwich", sandwich),
        ("selection witness", witness),
        ("propagation hand trace", propagation_trace),
        ("schedule dominance", schedule_dominance),
        ("invalidation accounting", invalidation_accounting),
        ("ttft trend", trend),
        ("ratio sweep", ratio_sweep),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
