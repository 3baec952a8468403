//! Condition-level aggregates and the round-trace event log they are folded
//! from.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::envsim::{ObjectVariant, Outcome};
use crate::error::{Error, Result};
use crate::runtime::{EpisodeStats, RoundRecord, RoundTotals, RuntimePolicy};

use super::config::MethodSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub name: String,
    /// Which grid produced the condition (`table5`, `verifier`, ...).
    pub grid: String,
    pub method: MethodSpec,
    pub speed_name: String,
    /// Belt speed in m/min.
    pub speed: f64,
    pub variant: ObjectVariant,
    pub policy: RuntimePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub spec: ConditionSpec,
    pub trials: usize,
    pub successes: usize,
    /// Success rate in percent.
    pub sr: f64,
    pub lat_ms: f64,
    pub per_action_ms: f64,
    pub fr: f64,
    pub acc: f64,
    /// Baseline Lat over this condition's Lat.
    pub speedup: f64,
    pub totals: RoundTotals,
    pub episodes: Vec<EpisodeStats>,
}

impl ConditionReport {
    /// Pools round counts over episodes, in the given order.
    pub fn aggregate(spec: ConditionSpec, episodes: Vec<EpisodeStats>, baseline_lat_ms: f64) -> Self {
        let mut totals = RoundTotals::default();
        for e in &episodes {
            totals.merge(&e.totals);
        }
        let successes = episodes.iter().filter(|e| e.success).count();
        let trials = episodes.len();
        let lat_ms = totals.lat_ms();
        Self {
            sr: if trials > 0 { 100.0 * successes as f64 / trials as f64 } else { 0.0 },
            lat_ms,
            per_action_ms: totals.per_action_ms(),
            fr: totals.flash_rate(),
            acc: totals.acceptance(spec.policy.replan),
            speedup: if lat_ms > 0.0 { baseline_lat_ms / lat_ms } else { 0.0 },
            spec,
            trials,
            successes,
            totals,
            episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteHeader {
    pub fingerprint: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub baseline: String,
    pub baseline_lat_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub header: SuiteHeader,
    pub conditions: Vec<ConditionReport>,
}

impl SuiteReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.spec.name == name)
    }
}

/// One line of the trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    Suite(SuiteHeader),
    Condition {
        index: usize,
        spec: ConditionSpec,
    },
    Round {
        condition: usize,
        seed: u64,
        #[serde(flatten)]
        record: RoundRecord,
    },
    Episode {
        condition: usize,
        seed: u64,
        outcome: Outcome,
        ticks: u64,
    },
}

fn trace_err(msg: impl Into<String>) -> Error {
    Error::invalid("trace log", msg)
}

/// Rebuilds a suite report from nothing but the trace events.
pub fn reaggregate(events: &[TraceEvent]) -> Result<SuiteReport> {
    let mut header = None;
    let mut specs: Vec<ConditionSpec> = Vec::new();
    let mut open: BTreeMap<(usize, u64), Vec<RoundRecord>> = BTreeMap::new();
    let mut episodes: Vec<Vec<EpisodeStats>> = Vec::new();
    for ev in events {
        match ev {
            TraceEvent::Suite(h) => header = Some(h.clone()),
            TraceEvent::Condition { index, spec } => {
                if *index != specs.len() {
                    return Err(trace_err(format!("condition {index} out of order")));
                }
                specs.push(spec.clone());
                episodes.push(Vec::new());
            }
            TraceEvent::Round { condition, seed, record } => {
                if *condition >= specs.len() {
                    return Err(trace_err(format!("round for undeclared condition {condition}")));
                }
                open.entry((*condition, *seed)).or_default().push(record.clone());
            }
            TraceEvent::Episode {
                condition,
                seed,
                outcome,
                ticks,
            } => {
                let spec = specs
                    .get(*condition)
                    .ok_or_else(|| trace_err(format!("episode for undeclared condition {condition}")))?;
                let rounds = open.remove(&(*condition, *seed)).unwrap_or_default();
                episodes[*condition].push(EpisodeStats::from_trace(*seed, *outcome, *ticks, &rounds, spec.policy.replan));
            }
        }
    }
    if let Some((&(c, s), _)) = open.iter().next() {
        return Err(trace_err(format!("condition {c} seed {s} has rounds but no episode record")));
    }
    let header = header.ok_or_else(|| trace_err("missing suite header"))?;
    let conditions = specs
        .into_iter()
        .zip(episodes)
        .map(|(spec, eps)| ConditionReport::aggregate(spec, eps, header.baseline_lat_ms))
        .collect();
    Ok(SuiteReport { header, conditions })
}
