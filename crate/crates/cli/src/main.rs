//! `kvmem`: generate episodes, replay them under a strategy, compare
//! strategies, and simulate or validate load/compute schedules.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use kvmem_core::episode::generate_episode;
use kvmem_core::pipeline::simulate;
use kvmem_core::{
    compare, run_episode, to_csv, EpisodeConfig, EpisodeTrace, Organization, Schedule, Strategy, StrategySpec,
    Sweep, Timeline, Workload,
};

#[derive(Parser)]
#[command(name = "kvmem", version, about = "KV-cache memory management experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic episode trace as JSONL.
    GenerateEpisode {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a trace under one strategy and write its JSON report.
    Run {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the strategy's default schedule.
        #[arg(long)]
        schedule: Option<Schedule>,
        /// Organize memory in fixed blocks instead of static/dynamic groups.
        #[arg(long)]
        fixed_blocks: bool,
        /// Rank by query attention only, without propagation.
        #[arg(long)]
        no_multi_hop: bool,
    },
    /// Run several strategies, optionally sweeping k or r_avg, and write CSV.
    Compare {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<Strategy>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', conflicts_with = "sweep_r")]
        sweep_k: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sweep_r: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a workload under one schedule and write the timeline.
    ScheduleSim {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        schedule: Schedule,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a timeline against its workload; exits non-zero on violations.
    Validate {
        #[arg(long)]
        timeline: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<EpisodeConfig> {
    let mut config = match path {
        Some(p) => read_json(p)?,
        None => EpisodeConfig::default(),
    };
    if let Ok(seed) = std::env::var("KEEP_SEED") {
        config.seed = seed
            .trim()
            .parse()
            .with_context(|| format!("KEEP_SEED={seed:?} is not an unsigned integer"))?;
    }
    config.validate()?;
    Ok(config)
}

fn load_trace(path: &Path) -> Result<EpisodeTrace> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    EpisodeTrace::read_jsonl(BufReader::new(f)).with_context(|| format!("reading trace {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateEpisode { config, out } => {
            let config = load_config(config.as_deref())?;
            let trace = generate_episode(&config)?;
            let f = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = BufWriter::new(f);
            trace.write_jsonl(&mut w)?;
            w.flush()?;
        }
        Command::Run {
            trace,
            strategy,
            config,
            out,
            schedule,
            fixed_blocks,
            no_multi_hop,
        } => {
            let config = load_config(config.as_deref())?;
            let trace = load_trace(&trace)?;
            let mut spec = StrategySpec::new(strategy);
            if let Some(s) = schedule {
                spec = spec.with_schedule(s);
            }
            if fixed_blocks {
                spec = spec.with_organization(Organization::FixedBlocks);
            }
            if no_multi_hop {
                spec = spec.without_multi_hop();
            }
            let report = run_episode(&trace, spec, &config)?;
            write_file(&out, &(report.to_json()? + "\n"))?;
        }
        Command::Compare {
            trace,
            strategies,
            config,
            sweep_k,
            sweep_r,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let trace = load_trace(&trace)?;
            let sweep = match (sweep_k, sweep_r) {
                (Some(k), _) => Sweep::K(k),
                (_, Some(r)) => Sweep::R(r),
                _ => Sweep::None,
            };
            let specs: Vec<StrategySpec> = strategies.into_iter().map(StrategySpec::new).collect();
            let reports = compare(&trace, &specs, &sweep, &config)?;
            write_file(&out, &to_csv(&reports))?;
        }
        Command::ScheduleSim { workload, schedule, out } => {
            let workload: Workload = read_json(&workload)?;
            let timeline = simulate(&workload, schedule)?;
            write_file(&out, &(serde_json::to_string_pretty(&timeline)? + "\n"))?;
        }
        Command::Validate { timeline } => {
            let timeline: Timeline = read_json(&timeline)?;
            if let Err(e) = timeline.workload.validate() {
                bail!("timeline carries an invalid workload: {e}");
            }
            let violations = timeline.validate();
            for v in &violations {
                println!("{v}");
            }
            if !violations.is_empty() {
                eprintln!("{} violation(s)", violations.len());
                return Ok(false);
            }
            println!("ok: {} events, makespan {} tu", timeline.events.len(), timeline.makespan_tu);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
