//! Dual-path replanning loop.
//!
//! Every round either runs the full path (fresh encoding plus a complete
//! denoise) or the flash path (draft from the fresh observation, verified
//! against the cached encoding of the last full round). While a round's
//! inference runs, the world keeps moving and the robot holds still for the
//! number of control ticks the latency model charges.

use serde::{Deserialize, Serialize};

use crate::actions::{ActionChunk, Standardizer};
use crate::draft::DraftModel;
use crate::envsim::{ConveyorEnv, EnvConfig, EpisodeSetup, ObjectVariant, Outcome};
use crate::error::{Error, Result};
use crate::flowpolicy::{denoise, ConditioningCache, Counted, DenoiseConfig, MainPolicy, Observation};
use crate::latcost::{round_cost, CostProfile, FallbackAccounting, LatencyCoupling, PathKind};
use crate::par::ExecMode;
use crate::rng::{stream, stream_rng};
use crate::verifier::{verify, VerifierConfig, VerifierReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    FullOnly,
    #[default]
    Flash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimePolicy {
    pub mode: InferenceMode,
    pub replan: usize,
    /// Force a full round after this many consecutive flash rounds; 0 = off.
    pub refresh_every: usize,
    pub phase_fallback: bool,
    /// Upper bound on actions executed per round; `None` means `replan`.
    pub prefix_cap: Option<usize>,
    pub fallback_accounting: FallbackAccounting,
    pub verifier: VerifierConfig,
    pub denoise: DenoiseConfig,
}

impl Default for RuntimePolicy {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Flash,
            replan: 12,
            refresh_every: 2,
            phase_fallback: true,
            prefix_cap: None,
            fallback_accounting: FallbackAccounting::Additive,
            verifier: VerifierConfig::default(),
            denoise: DenoiseConfig::default(),
        }
    }
}

impl RuntimePolicy {
    pub fn full_only() -> Self {
        Self {
            mode: InferenceMode::FullOnly,
            ..Default::default()
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.replan == 0 || self.replan > horizon {
            return Err(Error::invalid("replan size", format!("{} not in 1..={horizon}", self.replan)));
        }
        if self.prefix_cap == Some(0) {
            return Err(Error::invalid("prefix cap", "must be positive"));
        }
        self.verifier.validate()
    }

    pub fn cap(&self) -> usize {
        self.prefix_cap.unwrap_or(self.replan)
    }
}

/// The trained networks a runner needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub main: MainPolicy,
    pub draft: Option<DraftModel>,
    pub action_norm: Standardizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPath {
    Full,
    FlashAccepted,
    FlashRejectedFallback,
    FlashPhaseFallback,
    PeriodicRefresh,
}

impl RoundPath {
    pub fn is_fallback(self) -> bool {
        matches!(self, Self::FlashRejectedFallback | Self::FlashPhaseFallback)
    }

    pub fn runs_full(self) -> bool {
        self != Self::FlashAccepted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierSummary {
    pub prefix: usize,
    pub branch_prefixes: Vec<usize>,
    pub gripper_switch: bool,
    pub noise_seed: u64,
    pub max_distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<Vec<Vec<f64>>>,
}

impl VerifierSummary {
    fn from_report(r: &VerifierReport, keep_distances: bool) -> Self {
        Self {
            prefix: r.prefix,
            branch_prefixes: r.branch_prefixes.clone(),
            gripper_switch: r.gripper_switch_detected,
            noise_seed: r.noise_seed,
            max_distance: r.max_distance(),
            distances: keep_distances.then(|| r.distances.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub tick: u64,
    pub path: RoundPath,
    pub executed_prefix: usize,
    pub latency_ms: f64,
    pub stall_ticks: u64,
    pub velocity_evals: usize,
    /// Round index of the full round whose encoding this round used.
    pub cache_round: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier: Option<VerifierSummary>,
}

/// Counts pooled over rounds; the derived metrics are ratios of these.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundTotals {
    pub rounds: usize,
    pub flash_accepted: usize,
    pub accepted_prefix_sum: usize,
    pub actions: usize,
    pub latency_ms: f64,
}

impl RoundTotals {
    pub fn add_round(&mut self, r: &RoundRecord) {
        self.rounds += 1;
        self.actions += r.executed_prefix;
        self.latency_ms += r.latency_ms;
        if r.path == RoundPath::FlashAccepted {
            self.flash_accepted += 1;
            self.accepted_prefix_sum += r.executed_prefix;
        }
    }

    pub fn merge(&mut self, o: &RoundTotals) {
        self.rounds += o.rounds;
        self.flash_accepted += o.flash_accepted;
        self.accepted_prefix_sum += o.accepted_prefix_sum;
        self.actions += o.actions;
        self.latency_ms += o.latency_ms;
    }

    pub fn flash_rate(&self) -> f64 {
        ratio(self.flash_accepted as f64, self.rounds as f64)
    }

    /// Mean executed prefix of accepted flash rounds, normalized by `replan`.
    pub fn acceptance(&self, replan: usize) -> f64 {
        ratio(self.accepted_prefix_sum as f64, (self.flash_accepted * replan) as f64)
    }

    pub fn lat_ms(&self) -> f64 {
        ratio(self.latency_ms, self.rounds as f64)
    }

    pub fn per_action_ms(&self) -> f64 {
        ratio(self.latency_ms, self.actions as f64)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub seed: u64,
    pub success: bool,
    pub outcome: Outcome,
    pub ticks: u64,
    pub totals: RoundTotals,
    pub flash_rate: f64,
    pub acc: f64,
    pub lat_ms: f64,
    pub per_action_ms: f64,
}

impl EpisodeStats {
    pub fn from_trace(seed: u64, outcome: Outcome, ticks: u64, trace: &[RoundRecord], replan: usize) -> Self {
        let mut totals = RoundTotals::default();
        for r in trace {
            totals.add_round(r);
        }
        Self {
            seed,
            success: outcome.is_success(),
            outcome,
            ticks,
            totals,
            flash_rate: totals.flash_rate(),
            acc: totals.acceptance(replan),
            lat_ms: totals.lat_ms(),
            per_action_ms: totals.per_action_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub variant: ObjectVariant,
    /// Belt speed in m/min.
    pub speed: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub stats: EpisodeStats,
    pub trace: Vec<RoundRecord>,
}

/// True iff any scanned step's gripper value lies on the other side of zero
/// from `current` (standardized). A value of exactly zero counts.
pub fn detect_gripper_switch(chunks: &[&ActionChunk], current: f64, window: usize) -> bool {
    chunks.iter().any(|c| {
        (0..window.min(c.horizon())).any(|h| c.gripper(h) * current.signum() <= 0.0)
    })
}

pub struct Runner<'a> {
    pub env_cfg: &'a EnvConfig,
    pub policy: &'a RuntimePolicy,
    pub models: &'a Models,
    pub profile: &'a CostProfile,
    pub coupling: LatencyCoupling,
    pub exec: ExecMode,
    /// Keep per-step verifier distances in the trace.
    pub verbose: bool,
}

/// Result of one full inference: chunk, refreshed cache, evaluations.
pub struct FullRound {
    pub chunk: ActionChunk,
    pub cache: ConditioningCache,
    pub velocity_evals: usize,
}

pub fn full_round(models: &Models, obs: &Observation, cfg: &DenoiseConfig, round: usize, tick: u64, seed: u64) -> Result<FullRound> {
    let cache = models.main.encode(obs, round, tick)?;
    let field = Counted::new(&models.main.field);
    let mut rng = stream_rng(seed, &[stream::DENOISE, round as u64]);
    let chunk = denoise(&field, &cache, &obs.robot_state, cfg, &mut rng)?;
    Ok(FullRound {
        chunk,
        cache,
        velocity_evals: field.count(),
    })
}

/// Outcome of the flash-path attempt, before any fallback.
pub struct FlashAttempt {
    pub draft: ActionChunk,
    pub report: VerifierReport,
    pub velocity_evals: usize,
}

pub fn flash_round(
    models: &Models,
    obs: &Observation,
    cache: Option<&ConditioningCache>,
    cfg: &VerifierConfig,
    round: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<FlashAttempt> {
    let cache = cache.ok_or(Error::MissingCache)?;
    let draft_model = models
        .draft
        .as_ref()
        .ok_or_else(|| Error::invalid("flash round", "no draft model loaded"))?;
    let draft = draft_model.propose(obs)?;
    let gi = models.main.field.layout.gripper_index();
    let gripper = obs.robot_state.last().copied().unwrap_or(0.0);
    let current = models.action_norm.standardize_channel(gi, gripper);
    let field = Counted::new(&models.main.field);
    let mut rng = stream_rng(seed, &[stream::VERIFY, round as u64]);
    let report = verify(&field, &draft, cache, &obs.robot_state, current, cfg, &mut rng, exec)?;
    Ok(FlashAttempt {
        draft,
        report,
        velocity_evals: field.count(),
    })
}

impl Runner<'_> {
    fn hold(&self, env: &mut ConveyorEnv, ticks: u64) -> Result<()> {
        for _ in 0..ticks {
            if env.outcome().is_some() {
                break;
            }
            env.hold()?;
        }
        Ok(())
    }

    fn execute(&self, env: &mut ConveyorEnv, chunk: &ActionChunk, n: usize) -> Result<usize> {
        let raw = self.models.action_norm.destandardize(chunk)?;
        let mut done = 0;
        for h in 0..n.min(raw.horizon()) {
            if env.outcome().is_some() {
                break;
            }
            env.step(raw.row(h))?;
            done += 1;
        }
        Ok(done)
    }

    pub fn run_episode(&self, spec: &EpisodeSpec) -> Result<EpisodeResult> {
        let mut trace = Vec::new();
        self.run_inner(spec, &mut trace).map_err(|e| Error::Episode {
            rounds: trace.len(),
            source: Box::new(e),
        })
    }

    fn run_inner(&self, spec: &EpisodeSpec, trace: &mut Vec<RoundRecord>) -> Result<EpisodeResult> {
        let pol = self.policy;
        pol.validate(self.models.main.field.horizon)?;
        self.profile.validate()?;
        self.coupling.validate()?;
        if pol.mode == InferenceMode::Flash {
            round_cost(self.profile, PathKind::Flash)?;
        }
        let full_ms = round_cost(self.profile, PathKind::Full)?;
        let setup = EpisodeSetup::sample(self.env_cfg, spec.variant, spec.speed, spec.seed);
        let mut env = ConveyorEnv::new(self.env_cfg.clone(), setup);
        let mut cache: Option<ConditioningCache> = None;
        let mut flash_since_full = 0usize;
        let seed = spec.seed;
        let cap = pol.cap();

        while env.outcome().is_none() {
            let round = trace.len();
            let tick = env.tick();
            let obs = env.observe();
            let forced = cache.is_none() || pol.mode == InferenceMode::FullOnly;
            let refresh = !forced && pol.refresh_every > 0 && flash_since_full >= pol.refresh_every;

            let mut rec = RoundRecord {
                round,
                tick,
                path: RoundPath::Full,
                executed_prefix: 0,
                latency_ms: 0.0,
                stall_ticks: 0,
                velocity_evals: 0,
                cache_round: round,
                verifier: None,
            };

            let (chunk, limit) = if forced || refresh {
                rec.path = if refresh { RoundPath::PeriodicRefresh } else { RoundPath::Full };
                let fr = full_round(self.models, &obs, &pol.denoise, round, tick, seed)?;
                rec.latency_ms = full_ms;
                rec.stall_ticks = self.coupling.stall_ticks(full_ms);
                rec.velocity_evals = fr.velocity_evals;
                cache = Some(fr.cache);
                flash_since_full = 0;
                self.hold(&mut env, rec.stall_ticks)?;
                (fr.chunk, cap)
            } else {
                let attempt = flash_round(self.models, &obs, cache.as_ref(), &pol.verifier, round, seed, self.exec)?;
                rec.cache_round = cache.as_ref().map_or(round, |c| c.captured_round);
                rec.velocity_evals = attempt.velocity_evals;
                rec.verifier = Some(VerifierSummary::from_report(&attempt.report, self.verbose));
                let flash_ms = round_cost(self.profile, PathKind::Flash)?;
                let phase = pol.phase_fallback && attempt.report.gripper_switch_detected;
                if phase || attempt.report.prefix == 0 {
                    rec.path = if phase {
                        RoundPath::FlashPhaseFallback
                    } else {
                        RoundPath::FlashRejectedFallback
                    };
                    rec.latency_ms = pol.fallback_accounting.fallback_cost(self.profile)?;
                    rec.stall_ticks = self.coupling.stall_ticks(rec.latency_ms);
                    let flash_ticks = self.coupling.stall_ticks(flash_ms).min(rec.stall_ticks);
                    self.hold(&mut env, flash_ticks)?;
                    if env.outcome().is_some() {
                        // The episode ended before the full round could run.
                        rec.latency_ms = flash_ms;
                        rec.stall_ticks = flash_ticks;
                        trace.push(rec);
                        break;
                    }
                    let obs2 = env.observe();
                    let fr = full_round(self.models, &obs2, &pol.denoise, round, env.tick(), seed)?;
                    rec.velocity_evals += fr.velocity_evals;
                    rec.cache_round = round;
                    cache = Some(fr.cache);
                    flash_since_full = 0;
                    self.hold(&mut env, rec.stall_ticks - flash_ticks)?;
                    (fr.chunk, cap)
                } else {
                    rec.path = RoundPath::FlashAccepted;
                    rec.latency_ms = flash_ms;
                    rec.stall_ticks = self.coupling.stall_ticks(flash_ms);
                    flash_since_full += 1;
                    self.hold(&mut env, rec.stall_ticks)?;
                    let limit = attempt.report.prefix.min(cap);
                    (attempt.draft, limit)
                }
            };
            rec.executed_prefix = self.execute(&mut env, &chunk, limit)?;
            trace.push(rec);
        }
        let outcome = env.outcome().expect("loop exits only on a terminal outcome");
        let stats = EpisodeStats::from_trace(seed, outcome, env.tick(), trace, pol.replan);
        Ok(EpisodeResult {
            stats,
            trace: std::mem::take(trace),
        })
    }
}

/// Checks the bookkeeping identities of one episode trace against its
/// stats: pooled ratios, cache provenance, the refresh bound and the
/// phase-fallback guarantee. Returns a description of the first violation.
pub fn audit_trace(trace: &[RoundRecord], stats: &EpisodeStats, policy: &RuntimePolicy) -> Result<(), String> {
    let fail = |m: String| Err(m);
    let recomputed = EpisodeStats::from_trace(stats.seed, stats.outcome, stats.ticks, trace, policy.replan);
    if &recomputed != stats {
        return fail(format!("stats differ from trace re-aggregation: {recomputed:?} vs {stats:?}"));
    }
    let n = trace.len() as f64;
    let flash = trace.iter().filter(|r| r.path == RoundPath::FlashAccepted).count();
    let prefix: usize = trace.iter().filter(|r| r.path == RoundPath::FlashAccepted).map(|r| r.executed_prefix).sum();
    let lat: f64 = trace.iter().map(|r| r.latency_ms).sum();
    let actions: usize = trace.iter().map(|r| r.executed_prefix).sum();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    if !trace.is_empty() {
        if !close(stats.flash_rate, flash as f64 / n) {
            return fail(format!("FR {} != {flash}/{n}", stats.flash_rate));
        }
        if !close(stats.lat_ms, lat / n) {
            return fail(format!("Lat {} != {lat}/{n}", stats.lat_ms));
        }
    }
    if flash > 0 && !close(stats.acc, prefix as f64 / (flash * policy.replan) as f64) {
        return fail(format!("Acc {} inconsistent with accepted prefixes", stats.acc));
    }
    if actions > 0 && !close(stats.per_action_ms, lat / actions as f64) {
        return fail(format!("/Act {} inconsistent", stats.per_action_ms));
    }
    let mut last_full: Option<usize> = None;
    let mut run = 0usize;
    for (i, r) in trace.iter().enumerate() {
        if r.round != i {
            return fail(format!("round index {} at position {i}", r.round));
        }
        if r.executed_prefix > policy.cap() {
            return fail(format!("round {i} executed {} > cap", r.executed_prefix));
        }
        if r.path == RoundPath::FlashAccepted {
            if Some(r.cache_round) != last_full {
                return fail(format!("round {i} used cache of round {} but last full round was {last_full:?}", r.cache_round));
            }
            if policy.phase_fallback && r.verifier.as_ref().is_some_and(|v| v.gripper_switch) {
                return fail(format!("round {i} executed a draft with a gripper switch"));
            }
            run += 1;
            if policy.refresh_every > 0 && run > policy.refresh_every {
                return fail(format!("round {i}: {run} consecutive flash rounds"));
            }
        } else {
            let truncated = i + 1 == trace.len() && r.path.is_fallback() && Some(r.cache_round) == last_full;
            if r.cache_round != i && !truncated {
                return fail(format!("full round {i} records cache round {}", r.cache_round));
            }
            last_full = Some(i);
            run = 0;
        }
    }
    if policy.refresh_every > 0 && !trace.is_empty() {
        let bound = policy.refresh_every as f64 / (policy.refresh_every + 1) as f64;
        if stats.flash_rate > bound + 1e-12 {
            return fail(format!("FR {} above refresh bound {bound}", stats.flash_rate));
        }
    }
    Ok(())
}
