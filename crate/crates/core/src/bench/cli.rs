//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! run fails.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::envsim::{Dataset, ObjectVariant};
use crate::error::{Error, Result};
use crate::runtime::{EpisodeSpec, Runner};

use super::checkpoint::Checkpoint;
use super::config::{cfg_err, Config, MethodSpec, Overrides};
use super::harness::{self, Grid};
use super::metrics::{reaggregate, SuiteHeader, TraceEvent};
use super::pipeline;
use super::report::{self, Format};
use super::selftest;

pub const DATASET_FILE: &str = "dataset.json";
pub const RUN_TRACE_FILE: &str = "run_trace.jsonl";

#[derive(Debug, Parser)]
#[command(name = "specflow", version, about = "Draft-and-verify inference for flow-matching action policies")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Trial seed for run and bench; training seed for the other subcommands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Cost profile for flash methods.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Named belt speed: demo, medium, high or extra_high.
    #[arg(long, global = true)]
    pub speed: Option<String>,
    /// Verifier threshold.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Comma-separated verification timesteps in (0, 1).
    #[arg(long, global = true, value_delimiter = ',')]
    pub timesteps: Option<Vec<f64>>,
    /// Periodic refresh interval; 0 disables it.
    #[arg(long, global = true)]
    pub pf: Option<usize>,
    /// Phase fallback on or off.
    #[arg(long, global = true, value_parser = parse_switch)]
    pub fb: Option<bool>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate expert demonstrations.
    GenData,
    /// Train the flow-matching policy.
    TrainMain,
    /// Distil the draft model from the trained policy.
    TrainDraft,
    /// Run one episode and write its round trace.
    Run(RunArgs),
    /// Run a benchmark grid and write reports.
    Bench(BenchArgs),
    /// Re-aggregate a report from its trace log.
    Report(ReportArgs),
    /// Run the built-in oracle and brute-force checks.
    VerifySelftest,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Method as mode/profile, for example flash/flash_triton.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value = "large", value_parser = parse_variant)]
    pub variant: ObjectVariant,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub grid: Grid,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "csv,json,traces")]
    pub format: Vec<Format>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Trace log; defaults to traces.jsonl in the output directory.
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got `{s}`")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<ObjectVariant, String> {
    ObjectVariant::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("expected large or small, got `{s}`"))
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match dispatch(&cli, cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let c = &cli.common;
    let overrides = Overrides {
        seed: c.seed,
        out_dir: c.out_dir.clone(),
        profile: c.profile.clone(),
        speed: c.speed.clone(),
        delta: c.delta,
        timesteps: c.timesteps.clone(),
        pf: c.pf,
        fb: c.fb,
        trials: c.trials,
    };
    overrides.apply(&mut cfg)?;
    let trains = matches!(cli.command, Command::GenData | Command::TrainMain | Command::TrainDraft);
    if trains {
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
    }
    Ok(cfg)
}

fn require_seed(cli: &Cli, sub: &str) -> Result<u64> {
    cli.common
        .seed
        .ok_or_else(|| cfg_err("--seed", format!("`{sub}` requires --seed")))
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.common.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn dispatch(cli: &Cli, cfg: Config) -> Result<()> {
    let verbose = !cli.common.quiet;
    let out = cfg.paths.out_dir.clone();
    match &cli.command {
        Command::GenData => {
            let ds = pipeline::generate(&cfg)?;
            let path = out.join(DATASET_FILE);
            write_json(&path, &ds)?;
            say(cli, format!("{} pairs from {} episodes -> {}", ds.pairs.len(), ds.demos.len(), path.display()));
        }
        Command::TrainMain => {
            let ds = dataset(&cfg, &out)?;
            let (main, loss) = pipeline::train_main(&cfg, &ds)?;
            say(cli, format!("main policy: final loss {:.4}", loss.last().copied().unwrap_or(f64::NAN)));
            let ckpt = Checkpoint {
                models: crate::runtime::Models {
                    main,
                    draft: None,
                    action_norm: ds.action_norm.clone(),
                },
                config: serde_json::to_value(&cfg)?,
                seeds: pipeline::SeedLineage::new(&cfg).named(),
            };
            ckpt.save(&cfg.paths.checkpoint)?;
            say(cli, format!("checkpoint -> {}", cfg.paths.checkpoint.display()));
        }
        Command::TrainDraft => {
            let mut ckpt = Checkpoint::load(&cfg.paths.checkpoint)?;
            let ds = dataset(&cfg, &out)?;
            let (draft, rep) = pipeline::train_draft_model(&cfg, &ds, &ckpt.models.main)?;
            pipeline::check_asymmetry(&ckpt.models.main, &draft, cfg.runtime.denoise.num_steps)?;
            say(cli, format!("draft: best validation RMS {:.4} at epoch {}", rep.best_val_rms, rep.best_epoch));
            ckpt.models.draft = Some(draft);
            ckpt.seeds = pipeline::SeedLineage::new(&cfg).named();
            ckpt.save(&cfg.paths.checkpoint)?;
            say(cli, format!("checkpoint -> {}", cfg.paths.checkpoint.display()));
        }
        Command::Run(args) => {
            let seed = require_seed(cli, "run")?;
            let ckpt = pipeline::load_or_train(&cfg, &cfg.paths.checkpoint, verbose)?;
            let method = match &args.method {
                Some(m) => MethodSpec::parse(m)?,
                None => cfg.bench.ablation_method.clone(),
            };
            let profile = cfg.latency.profile(&method.profile).map_err(|e| cfg_err("--method", e.to_string()))?;
            let speed_name = cfg.bench.ablation_speed.clone();
            let speed = cfg.bench.speeds.get(&speed_name).ok_or_else(|| cfg_err("--speed", "unknown speed"))?;
            let policy = harness::method_policy(&cfg, &method);
            let spec = harness::condition(
                "run",
                format!("{}@{speed_name}/{}", method.label(), args.variant.name()),
                &method,
                &speed_name,
                speed,
                args.variant,
                policy.clone(),
            );
            let episode_seed = harness::trial_seeds(seed, 1)[0];
            let runner = Runner {
                env_cfg: &cfg.env,
                policy: &policy,
                models: &ckpt.models,
                profile: &profile,
                coupling: cfg.latency.coupling,
                exec: cfg.exec,
                verbose: true,
            };
            let res = runner.run_episode(&EpisodeSpec {
                variant: args.variant,
                speed,
                seed: episode_seed,
            })?;
            let mut events = vec![
                TraceEvent::Suite(SuiteHeader {
                    fingerprint: cfg.fingerprint(),
                    code_version: env!("CARGO_PKG_VERSION").to_string(),
                    seeds: vec![episode_seed],
                    baseline: cfg.bench.baseline.label(),
                    baseline_lat_ms: cfg.latency.profile(&cfg.bench.baseline.profile)?.full_total(),
                }),
                TraceEvent::Condition { index: 0, spec },
            ];
            events.extend(res.trace.iter().map(|r| TraceEvent::Round {
                condition: 0,
                seed: episode_seed,
                record: r.clone(),
            }));
            events.push(TraceEvent::Episode {
                condition: 0,
                seed: episode_seed,
                outcome: res.stats.outcome,
                ticks: res.stats.ticks,
            });
            std::fs::create_dir_all(&out)?;
            let path = out.join(RUN_TRACE_FILE);
            report::write_traces(&events, File::create(&path)?)?;
            let s = &res.stats;
            println!(
                "outcome={:?} ticks={} rounds={} FR={:.3} Acc={:.3} Lat_ms={:.2} per_action_ms={:.3}",
                s.outcome, s.ticks, s.totals.rounds, s.flash_rate, s.acc, s.lat_ms, s.per_action_ms
            );
            say(cli, format!("trace -> {}", path.display()));
        }
        Command::Bench(args) => {
            let seed = require_seed(cli, "bench")?;
            let ckpt = pipeline::load_or_train(&cfg, &cfg.paths.checkpoint, verbose)?;
            let conditions = harness::grid_conditions(&cfg, args.grid)?;
            say(cli, format!("{} conditions x {} trials", conditions.len(), cfg.bench.trials));
            let run = harness::run_suite(&cfg, &ckpt.models, &conditions, seed)?;
            for p in report::emit_report(&run.report, &run.traces, &out, &args.format)? {
                say(cli, format!("wrote {}", p.display()));
            }
            print_table(&run.report);
        }
        Command::Report(args) => {
            let path = args.traces.clone().unwrap_or_else(|| out.join(report::TRACE_FILE));
            let events = report::read_traces(BufReader::new(File::open(&path)?))?;
            let rep = reaggregate(&events)?;
            let dir = path.parent().unwrap_or(Path::new("."));
            let json = dir.join(report::JSON_FILE);
            if json.exists() {
                if report::read_json(&json)? != rep {
                    return Err(Error::invalid("report", format!("{} disagrees with the re-aggregated traces", json.display())));
                }
                say(cli, format!("{} matches the traces", json.display()));
            }
            report::write_csv(&rep, std::io::stdout().lock())?;
        }
        Command::VerifySelftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(Error::invalid("selftest", "one or more checks failed"));
            }
        }
    }
    Ok(())
}

fn dataset(cfg: &Config, out: &Path) -> Result<Dataset> {
    let path = out.join(DATASET_FILE);
    if path.exists() {
        return Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?);
    }
    pipeline::generate(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn print_table(rep: &super::metrics::SuiteReport) {
    println!("{:<44} {:>6} {:>8} {:>8} {:>6} {:>6} {:>7}", "condition", "SR", "Lat_ms", "ms/act", "FR", "Acc", "speedup");
    for c in &rep.conditions {
        println!(
            "{:<44} {:>6.1} {:>8.2} {:>8.3} {:>6.3} {:>6.3} {:>7.2}",
            c.spec.name, c.sr, c.lat_ms, c.per_action_ms, c.fr, c.acc, c.speedup
        );
    }
}
