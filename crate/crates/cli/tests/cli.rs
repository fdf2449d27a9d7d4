use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kvmem_core::pipeline::LayerWork;
use kvmem_core::{EpisodeConfig, LoadItem, Timeline, Workload};

fn kvmem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvmem"))
        .args(args)
        .current_dir(dir)
        .env_remove("KEEP_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config(dir: &Path) -> PathBuf {
    let cfg = EpisodeConfig {
        num_steps: 3,
        ..EpisodeConfig::default()
    };
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn generated_traces_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(kvmem(d, &["generate-episode", "--config", "config.json", "--out", "a.jsonl"]));
    ok(kvmem(d, &["generate-episode", "--config", "config.json", "--out", "b.jsonl"]));
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());

    let reseeded = Command::new(env!("CARGO_BIN_EXE_kvmem"))
        .args(["generate-episode", "--config", "config.json", "--out", "c.jsonl"])
        .current_dir(d)
        .env("KEEP_SEED", "99")
        .output()
        .unwrap();
    ok(reseeded);
    assert_ne!(a, std::fs::read(d.join("c.jsonl")).unwrap());
}

#[test]
fn bad_inputs_exit_with_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("t.jsonl"), "{\"event\":\"bogus\"}\n").unwrap();
    let out = kvmem(d, &["run", "--trace", "t.jsonl", "--strategy", "keep", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = kvmem(d, &["run", "--trace", "t.jsonl", "--strategy", "fastest", "--out", "r.json"]);
    assert!(!out.status.success());
}

#[test]
fn run_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(kvmem(d, &["generate-episode", "--config", "config.json", "--out", "t.jsonl"]));
    ok(kvmem(
        d,
        &["run", "--trace", "t.jsonl", "--strategy", "full", "--config", "config.json", "--out", "r.json"],
    ));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["strategy"], "full");
    assert_eq!(report["summary"]["mean_div_l2"], 0.0);
    assert_eq!(report["steps"].as_array().unwrap().len(), 3);
}

#[test]
fn compare_matches_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(kvmem(d, &["generate-episode", "--config", "config.json", "--out", "t.jsonl"]));
    ok(kvmem(
        d,
        &[
            "compare",
            "--trace",
            "t.jsonl",
            "--config",
            "config.json",
            "--strategies",
            "full,prefix,full-reuse,fixed-pos,deviation,keep",
            "--sweep-k",
            "6,12",
            "--out",
            "c.csv",
        ],
    ));
    let csv = std::fs::read_to_string(d.join("c.csv")).unwrap();
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/compare_k.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &csv).unwrap();
    }
    assert_eq!(csv, std::fs::read_to_string(&golden).unwrap());
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn empty_strategy_list_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    ok(kvmem(d, &["generate-episode", "--config", "config.json", "--out", "t.jsonl"]));
    ok(kvmem(d, &["compare", "--trace", "t.jsonl", "--config", "config.json", "--out", "c.csv"]));
    assert_eq!(std::fs::read_to_string(d.join("c.csv")).unwrap(), format!("{}\n", kvmem_core::harness::CSV_HEADER));
}

fn item(layer: usize, tu: f64) -> LoadItem {
    LoadItem {
        owner: 0,
        layer,
        bytes: 1024,
        tu,
        members: vec![0],
    }
}

#[test]
fn schedules_simulate_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let w = Workload {
        attention_fraction: 0.5,
        adaptive: false,
        plan: vec![Default::default(); 3],
        layers: [vec![], vec![item(1, 2.0)], vec![item(2, 3.0)]]
            .into_iter()
            .map(|loads| LayerWork {
                compute_tu: 4.0,
                eval_tu: 0.0,
                loads,
            })
            .collect(),
    };
    std::fs::write(d.join("w.json"), serde_json::to_string(&w).unwrap()).unwrap();
    for (sched, want) in [("seq", 17.0), ("overlap", 12.0), ("balanced", 12.0)] {
        let out = format!("{sched}.json");
        ok(kvmem(d, &["schedule-sim", "--workload", "w.json", "--schedule", sched, "--out", &out]));
        let tl: Timeline = serde_json::from_str(&std::fs::read_to_string(d.join(&out)).unwrap()).unwrap();
        assert_eq!(tl.makespan_tu, want, "{sched}");
        ok(kvmem(d, &["validate", "--timeline", &out]));
    }

    let mut tl: Timeline = serde_json::from_str(&std::fs::read_to_string(d.join("overlap.json")).unwrap()).unwrap();
    for e in &mut tl.events {
        if e.layer == 2 && e.kind == kvmem_core::EventKind::Compute {
            e.start_tu -= 3.0;
            e.end_tu -= 3.0;
        }
    }
    std::fs::write(d.join("bad.json"), serde_json::to_string(&tl).unwrap()).unwrap();
    let out = kvmem(d, &["validate", "--timeline", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("D1"));
}

#[test]
fn shipped_examples_parse() {
    let docs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/examples");
    let cfg: EpisodeConfig = serde_json::from_str(&std::fs::read_to_string(docs.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg, EpisodeConfig::default());
    let w: Workload = serde_json::from_str(&std::fs::read_to_string(docs.join("workload.json")).unwrap()).unwrap();
    w.validate().unwrap();
}
