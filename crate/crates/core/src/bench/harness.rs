//! Condition grids and the seeded episode runner behind `bench`.

use serde::{Deserialize, Serialize};

use crate::envsim::ObjectVariant;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{derive_seed, stream};
use crate::runtime::{EpisodeResult, EpisodeSpec, InferenceMode, Models, Runner, RuntimePolicy};
use crate::verifier::VerifierConfig;

use super::config::{Config, MethodSpec};
use super::metrics::{ConditionReport, ConditionSpec, SuiteHeader, SuiteReport, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// Methods × speeds × variants.
    Table5,
    /// Verifier threshold × number of timesteps.
    Verifier,
    /// Periodic refresh × phase fallback.
    Components,
    All,
}

fn speed_of(cfg: &Config, name: &str) -> Result<f64> {
    cfg.bench
        .speeds
        .get(name)
        .ok_or_else(|| Error::invalid("speed", format!("unknown speed `{name}`")))
}

pub fn method_policy(cfg: &Config, method: &MethodSpec) -> RuntimePolicy {
    RuntimePolicy {
        mode: method.mode,
        ..cfg.runtime.clone()
    }
}

pub fn condition(
    grid: &str,
    name: String,
    method: &MethodSpec,
    speed_name: &str,
    speed: f64,
    variant: ObjectVariant,
    policy: RuntimePolicy,
) -> ConditionSpec {
    ConditionSpec {
        name,
        grid: grid.to_string(),
        method: method.clone(),
        speed_name: speed_name.to_string(),
        speed,
        variant,
        policy,
    }
}

pub fn table5_conditions(cfg: &Config) -> Vec<ConditionSpec> {
    let mut out = Vec::new();
    for (sname, speed) in cfg.bench.speeds.named() {
        for &variant in &cfg.bench.variants {
            for m in &cfg.bench.methods {
                out.push(condition(
                    "table5",
                    format!("{}@{sname}/{}", m.label(), variant.name()),
                    m,
                    sname,
                    speed,
                    variant,
                    method_policy(cfg, m),
                ));
            }
        }
    }
    out
}

pub fn verifier_conditions(cfg: &Config) -> Result<Vec<ConditionSpec>> {
    let ab = &cfg.bench.verifier_ablation;
    let sname = cfg.bench.ablation_speed.as_str();
    let speed = speed_of(cfg, sname)?;
    let m = &cfg.bench.ablation_method;
    let mut out = Vec::new();
    for &variant in &cfg.bench.variants {
        for &k in &ab.ks {
            for &delta in &ab.deltas {
                let policy = RuntimePolicy {
                    mode: m.mode,
                    refresh_every: ab.refresh_every,
                    phase_fallback: ab.phase_fallback,
                    verifier: VerifierConfig {
                        timesteps: VerifierConfig::evenly_spaced(k),
                        delta,
                        ..cfg.runtime.verifier.clone()
                    },
                    ..cfg.runtime.clone()
                };
                out.push(condition(
                    "verifier",
                    format!("delta={delta} K={k}@{sname}/{}", variant.name()),
                    m,
                    sname,
                    speed,
                    variant,
                    policy,
                ));
            }
        }
    }
    Ok(out)
}

pub fn component_conditions(cfg: &Config) -> Result<Vec<ConditionSpec>> {
    let ab = &cfg.bench.component_ablation;
    let sname = cfg.bench.ablation_speed.as_str();
    let speed = speed_of(cfg, sname)?;
    let m = &cfg.bench.ablation_method;
    let mut out = Vec::new();
    for &variant in &cfg.bench.variants {
        for &fb in &ab.phase_fallback {
            for &pf in &ab.refresh_every {
                let policy = RuntimePolicy {
                    mode: m.mode,
                    refresh_every: pf,
                    phase_fallback: fb,
                    ..cfg.runtime.clone()
                };
                let fb_s = if fb { "on" } else { "off" };
                out.push(condition(
                    "components",
                    format!("PF={pf} FB={fb_s}@{sname}/{}", variant.name()),
                    m,
                    sname,
                    speed,
                    variant,
                    policy,
                ));
            }
        }
    }
    Ok(out)
}

pub fn grid_conditions(cfg: &Config, grid: Grid) -> Result<Vec<ConditionSpec>> {
    Ok(match grid {
        Grid::Table5 => table5_conditions(cfg),
        Grid::Verifier => verifier_conditions(cfg)?,
        Grid::Components => component_conditions(cfg)?,
        Grid::All => {
            let mut v = table5_conditions(cfg);
            v.extend(verifier_conditions(cfg)?);
            v.extend(component_conditions(cfg)?);
            v
        }
    })
}

/// Episode seeds for `trials` runs under base seed `seed`. Every condition
/// uses the same list, so comparisons are paired.
pub fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64).map(|i| derive_seed(seed, &[stream::EPISODE, i])).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRun {
    pub report: SuiteReport,
    pub traces: Vec<TraceEvent>,
}

pub fn run_episode_for(cfg: &Config, models: &Models, spec: &ConditionSpec, seed: u64) -> Result<EpisodeResult> {
    let profile = cfg.latency.profile(&spec.method.profile)?;
    let runner = Runner {
        env_cfg: &cfg.env,
        policy: &spec.policy,
        models,
        profile: &profile,
        coupling: cfg.latency.coupling,
        exec: par::ExecMode::Sequential,
        verbose: false,
    };
    runner.run_episode(&EpisodeSpec {
        variant: spec.variant,
        speed: spec.speed,
        seed,
    })
}

/// Runs every condition over the seeded trials. Episodes may run
/// concurrently; results are gathered in (condition, seed) order.
pub fn run_suite(cfg: &Config, models: &Models, conditions: &[ConditionSpec], seed: u64) -> Result<SuiteRun> {
    if models.draft.is_none() && conditions.iter().any(|c| c.policy.mode == InferenceMode::Flash) {
        return Err(Error::invalid("bench", "flash conditions need a draft model in the checkpoint"));
    }
    for c in conditions {
        cfg.latency.profile(&c.method.profile)?;
    }
    let seeds = trial_seeds(seed, cfg.bench.trials);
    let baseline_lat_ms = cfg.latency.profile(&cfg.bench.baseline.profile)?.full_total();
    let header = SuiteHeader {
        fingerprint: cfg.fingerprint(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: seeds.clone(),
        baseline: cfg.bench.baseline.label(),
        baseline_lat_ms,
    };
    let jobs: Vec<(usize, u64)> = (0..conditions.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = par::try_map(cfg.exec, &jobs, |&(c, s)| run_episode_for(cfg, models, &conditions[c], s))?;
    let mut traces = vec![TraceEvent::Suite(header.clone())];
    let mut per_cond: Vec<Vec<_>> = vec![Vec::new(); conditions.len()];
    for (ci, spec) in conditions.iter().enumerate() {
        traces.push(TraceEvent::Condition {
            index: ci,
            spec: spec.clone(),
        });
    }
    for (&(c, s), res) in jobs.iter().zip(results) {
        for r in &res.trace {
            traces.push(TraceEvent::Round {
                condition: c,
                seed: s,
                record: r.clone(),
            });
        }
        traces.push(TraceEvent::Episode {
            condition: c,
            seed: s,
            outcome: res.stats.outcome,
            ticks: res.stats.ticks,
        });
        per_cond[c].push(res.stats);
    }
    let conditions = conditions
        .iter()
        .cloned()
        .zip(per_cond)
        .map(|(spec, eps)| ConditionReport::aggregate(spec, eps, baseline_lat_ms))
        .collect();
    Ok(SuiteRun {
        report: SuiteReport { header, conditions },
        traces,
    })
}
