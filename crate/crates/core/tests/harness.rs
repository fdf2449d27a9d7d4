use kvmem_core::episode::generate_episode;
use kvmem_core::*;

fn update_heavy(seed: u64) -> EpisodeConfig {
    let mut c = EpisodeConfig {
        num_segments: 48,
        num_groups: 12,
        retrieval_k: 20,
        seed,
        ..EpisodeConfig::default()
    };
    for cat in &mut c.categories {
        cat.count = 12;
    }
    c
}

#[test]
fn strategies_agree_on_the_extremes() {
    let cfg = EpisodeConfig {
        num_steps: 8,
        ..EpisodeConfig::default()
    };
    let trace = generate_episode(&cfg).unwrap();
    let full = run_episode(&trace, StrategySpec::new(Strategy::Full), &cfg).unwrap();
    assert_eq!(full.summary.mean_div_l2, 0.0);
    assert_eq!(full.summary.mean_div_kl, 0.0);
    assert_eq!(full.summary.reuse_ratio, 0.0);
    let reuse = run_episode(&trace, StrategySpec::new(Strategy::FullReuse), &cfg).unwrap();
    for step in &reuse.steps {
        assert!(step.plan_sizes.iter().all(|&n| n == 0));
    }
    assert!(reuse.summary.mean_div_l2 > 0.0);
}

#[test]
fn prefill_accounting_conserves_tokens() {
    let cfg = EpisodeConfig {
        num_steps: 6,
        ..EpisodeConfig::default()
    };
    let trace = generate_episode(&cfg).unwrap();
    let segment_tokens = 8u64;
    for s in Strategy::ALL {
        let rep = run_episode(&trace, StrategySpec::new(s), &cfg).unwrap();
        for step in &rep.steps {
            let presented = step.realized_segments as u64 * segment_tokens * cfg.model.num_layers as u64;
            assert_eq!(step.stats.tokens_reused + step.stats.tokens_recomputed, presented, "{}", rep.strategy);
        }
    }
}

/// Paired comparison of keep against one ablation across 20 episodes.
fn paired(ablation: StrategySpec, metric: fn(&Summary) -> f64) -> Vec<(u64, f64, f64)> {
    let base = StrategySpec::new(Strategy::Keep);
    (0..20)
        .filter_map(|seed| {
            let cfg = update_heavy(seed);
            let trace = generate_episode(&cfg).unwrap();
            let reps = compare(&trace, &[base, ablation], &Sweep::None, &cfg).unwrap();
            let (k, a) = (metric(&reps[0].summary), metric(&reps[1].summary));
            (a <= k).then_some((seed, k, a))
        })
        .collect()
}

#[test]
fn fixed_blocks_cost_time() {
    let bad = paired(
        StrategySpec::new(Strategy::Keep).with_organization(Organization::FixedBlocks),
        |s| s.mean_ttft_tu,
    );
    assert!(bad.is_empty(), "(seed, keep, ablation) not slower: {bad:?}");
}

#[test]
fn fixed_blocks_cost_fidelity() {
    let bad = paired(
        StrategySpec::new(Strategy::Keep).with_organization(Organization::FixedBlocks),
        |s| s.mean_div_l2,
    );
    assert!(bad.is_empty(), "(seed, keep, ablation) not less faithful: {bad:?}");
}

#[test]
fn propagation_improves_fidelity() {
    let bad = paired(StrategySpec::new(Strategy::Keep).without_multi_hop(), |s| s.mean_div_l2);
    assert!(bad.is_empty(), "(seed, keep, ablation) not less faithful: {bad:?}");
}

#[test]
fn balanced_loading_saves_time() {
    let bad = paired(
        StrategySpec::new(Strategy::Keep).with_schedule(Schedule::Overlap),
        |s| s.mean_ttft_tu,
    );
    assert!(bad.is_empty(), "(seed, keep, ablation) not slower: {bad:?}");
}

#[test]
fn full_recompute_is_slowest() {
    for seed in 0..3 {
        let cfg = EpisodeConfig {
            num_steps: 8,
            seed,
            ..EpisodeConfig::default()
        };
        let trace = generate_episode(&cfg).unwrap();
        let specs: Vec<StrategySpec> = Strategy::ALL.iter().map(|&s| StrategySpec::new(s)).collect();
        let reps = compare(&trace, &specs, &Sweep::None, &cfg).unwrap();
        let full = reps.iter().find(|r| r.strategy == "full").unwrap().summary.mean_ttft_tu;
        for r in &reps {
            assert!(r.summary.mean_ttft_tu <= full, "seed {seed}: {} {} vs full {full}", r.strategy, r.summary.mean_ttft_tu);
        }
    }
}

#[test]
fn full_recompute_grows_superlinearly() {
    let cfg = update_heavy(0);
    let trace = generate_episode(&cfg).unwrap();
    let reps = compare(&trace, &[StrategySpec::new(Strategy::Full)], &Sweep::K(vec![10, 20, 40]), &cfg).unwrap();
    let per_segment: Vec<f64> = reps
        .iter()
        .map(|r| r.summary.mean_ttft_tu / r.summary.mean_realized_segments)
        .collect();
    assert!(per_segment.windows(2).all(|w| w[1] > w[0]), "{per_segment:?}");
}

#[test]
fn quiet_memory_is_never_invalidated() {
    let mut cfg = EpisodeConfig {
        num_steps: 6,
        t: 1,
        ..EpisodeConfig::default()
    };
    for cat in &mut cfg.categories {
        cat.update_prob_per_step = 0.0;
    }
    let trace = generate_episode(&cfg).unwrap();
    assert_eq!(trace.num_updates(), 0);
    let rep = run_episode(&trace, StrategySpec::new(Strategy::Keep), &cfg).unwrap();
    assert_eq!(rep.totals.tokens_invalidated, 0);
    assert!(rep.steps.iter().skip(1).all(|s| s.stats.tokens_reused > 0));
}
