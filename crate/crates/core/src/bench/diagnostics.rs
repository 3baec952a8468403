//! Where verifier disagreement comes from.
//!
//! For sampled dataset states this measures
//! - `eps_ae`: how far one-step endpoint reconstructions of the main policy's
//!   own full-denoise output land from that output, with a fresh encoding;
//! - `eps_cond`: the extra gap when the encoding is stale (taken `stale_lag`
//!   replanning points earlier in the same episode);
//! - the discrepancy between accepted draft steps and the fresh full-path
//!   chunk, and how often it exceeds `delta + eps_ae + eps_cond`.

use serde::{Deserialize, Serialize};

use crate::actions::{cont_distance, ActionChunk, DistanceMetric};
use crate::envsim::TrainingPair;
use crate::error::{Error, Result};
use crate::flowpolicy::{denoise, ConditioningCache, DenoiseConfig, VelocityModel};
use crate::par::{self, ExecMode};
use crate::rng::{normal_vec, stream, stream_rng};
use crate::runtime::Models;
use crate::verifier::{reconstruct_endpoint, verify, VerifierConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub samples: usize,
    /// Distance in dataset pairs between the stale and the fresh state.
    pub stale_lag: usize,
    /// Leading steps compared.
    pub steps: usize,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            stale_lag: 4,
            steps: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                n: 0,
                mean: 0.0,
                p50: 0.0,
                p90: 0.0,
                max: 0.0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: q(0.5),
            p90: q(0.9),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub delta: f64,
    pub eps_ae: Summary,
    pub eps_cond: Summary,
    pub endpoint_discrepancy: Summary,
    pub sampled: usize,
    pub accepted: usize,
    pub bound_violations: usize,
    pub violation_fraction: f64,
}

/// Largest per-step distance, over the verifier timesteps and the first
/// `steps` steps, between `endpoint` and its one-step reconstructions.
pub fn endpoint_gap(
    field: &dyn VelocityModel,
    endpoint: &ActionChunk,
    cache: &ConditioningCache,
    state: &[f64],
    cfg: &VerifierConfig,
    noise_seed: u64,
    steps: usize,
) -> Result<f64> {
    let eps = endpoint.with_values(normal_vec(&mut stream_rng(noise_seed, &[]), endpoint.as_slice().len()))?;
    let cont = endpoint.layout().continuous_dims();
    let mut worst: f64 = 0.0;
    for &tau in &cfg.timesteps {
        let rec = reconstruct_endpoint(field, endpoint, &eps, tau, cache, state)?;
        for h in 0..steps.min(endpoint.horizon()) {
            worst = worst.max(cont_distance(&rec.row(h)[..cont], &endpoint.row(h)[..cont], cfg.metric));
        }
    }
    Ok(worst)
}

struct Sample {
    eps_ae: f64,
    eps_cond: f64,
    accepted: Option<f64>,
}

pub fn measure_error_decomposition(
    models: &Models,
    pairs: &[TrainingPair],
    verifier: &VerifierConfig,
    denoise_cfg: &DenoiseConfig,
    cfg: &DiagnosticsConfig,
    mode: ExecMode,
) -> Result<ErrorDecomposition> {
    let draft = models
        .draft
        .as_ref()
        .ok_or_else(|| Error::invalid("diagnostics", "a draft model is required"))?;
    let eligible: Vec<usize> = (cfg.stale_lag..pairs.len())
        .filter(|&i| pairs[i - cfg.stale_lag].episode == pairs[i].episode)
        .collect();
    if eligible.is_empty() || cfg.samples == 0 {
        return Err(Error::invalid("diagnostics", "no states with a stale predecessor"));
    }
    let stride = (eligible.len() / cfg.samples).max(1);
    let picked: Vec<usize> = eligible.iter().step_by(stride).take(cfg.samples).copied().collect();
    let gi = models.main.field.layout.gripper_index();
    let cont = models.main.field.layout.continuous_dims();
    let samples = par::try_map(mode, &picked, |&i| -> Result<Sample> {
        let p = &pairs[i];
        let state = &p.obs.robot_state;
        let fresh = models.main.encode(&p.obs, 1, 0)?;
        let stale = models.main.encode(&pairs[i - cfg.stale_lag].obs, 0, 0)?;
        let mut rng = stream_rng(cfg.seed, &[stream::DIAGNOSTICS, i as u64]);
        let full = denoise(&models.main.field, &fresh, state, denoise_cfg, &mut rng)?;
        let noise_seed = crate::rng::derive_seed(cfg.seed, &[stream::DIAGNOSTICS, i as u64, 1]);
        let a = endpoint_gap(&models.main.field, &full, &fresh, state, verifier, noise_seed, cfg.steps)?;
        let b = endpoint_gap(&models.main.field, &full, &stale, state, verifier, noise_seed, cfg.steps)?;
        let proposal = draft.propose(&p.obs)?;
        let current = models.action_norm.standardize_channel(gi, state.last().copied().unwrap_or(0.0));
        let report = verify(&models.main.field, &proposal, &stale, state, current, verifier, &mut rng, ExecMode::Sequential)?;
        let accepted = (report.prefix > 0).then(|| {
            (0..report.prefix.min(cfg.steps))
                .map(|h| cont_distance(&proposal.row(h)[..cont], &full.row(h)[..cont], DistanceMetric::L2))
                .fold(0.0, f64::max)
        });
        Ok(Sample {
            eps_ae: a,
            eps_cond: b - a,
            accepted,
        })
    })?;
    let ae: Vec<f64> = samples.iter().map(|s| s.eps_ae).collect();
    let cond: Vec<f64> = samples.iter().map(|s| s.eps_cond).collect();
    let disc: Vec<f64> = samples.iter().filter_map(|s| s.accepted).collect();
    let violations = samples
        .iter()
        .filter(|s| s.accepted.is_some_and(|d| d > verifier.delta + s.eps_ae + s.eps_cond.max(0.0)))
        .count();
    Ok(ErrorDecomposition {
        delta: verifier.delta,
        eps_ae: Summary::of(&ae),
        eps_cond: Summary::of(&cond),
        endpoint_discrepancy: Summary::of(&disc),
        sampled: samples.len(),
        accepted: disc.len(),
        bound_violations: violations,
        violation_fraction: if disc.is_empty() { 0.0 } else { violations as f64 / disc.len() as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::{ChannelLayout, Space};
    use crate::flowpolicy::fields;

    #[test]
    fn oracle_field_has_zero_gap_for_any_cache() {
        let layout = ChannelLayout::planar();
        let target = ActionChunk::new(normal_vec(&mut stream_rng(1, &[]), 60), 20, layout, Space::Standardized).unwrap();
        let oracle = fields::StraightLine { target: target.clone() };
        let cfg = VerifierConfig::default();
        let fresh = ConditioningCache {
            embedding: vec![1.0],
            captured_round: 3,
            captured_tick: 30,
        };
        let stale = ConditioningCache {
            embedding: vec![-1.0],
            captured_round: 1,
            captured_tick: 10,
        };
        let a = endpoint_gap(&oracle, &target, &fresh, &[], &cfg, 5, 12).unwrap();
        let b = endpoint_gap(&oracle, &target, &stale, &[], &cfg, 5, 12).unwrap();
        assert!(a <= 1e-12 && b - a <= 1e-12, "{a} {b}");
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[3.0, 1.0, 2.0, 4.0, 5.0]);
        assert_eq!((s.n, s.mean, s.p50, s.max), (5, 3.0, 3.0, 5.0));
        assert_eq!(Summary::of(&[]).n, 0);
    }
}
