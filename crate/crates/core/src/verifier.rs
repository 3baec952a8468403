//! Parallel multi-timestep verification of a draft chunk against the main
//! velocity field.
//!
//! Each branch `k` noises the draft to `tau_k` with one shared noise sample,
//! reconstructs the endpoint with a single velocity evaluation, and measures
//! per-step distances to the draft. A branch accepts the longest leading run
//! of steps within `delta`; the round accepts the minimum over branches.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::actions::{cont_distance, ActionChunk, DistanceMetric, Space};
use crate::error::{Error, Result};
use crate::flowpolicy::{ConditioningCache, VelocityModel};
use crate::par::{self, ExecMode};
use crate::rng::{normal_vec, stream_rng, Rng};
use crate::runtime::detect_gripper_switch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierConfig {
    pub timesteps: Vec<f64>,
    pub delta: f64,
    pub metric: DistanceMetric,
    /// Steps scanned for a gripper switch; `None` scans the whole chunk.
    pub gripper_window: Option<usize>,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![1.0 / 3.0, 2.0 / 3.0],
            delta: 0.15,
            metric: DistanceMetric::L2,
            gripper_window: None,
        }
    }
}

impl VerifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(Error::invalid("verifier timesteps", "need at least one"));
        }
        if self.timesteps.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::invalid("verifier timesteps", "every tau must lie in (0, 1)"));
        }
        if self.timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("verifier timesteps", "must be strictly increasing"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid("verifier delta", "must be finite and non-negative"));
        }
        if self.gripper_window == Some(0) {
            return Err(Error::invalid("gripper window", "must be positive"));
        }
        Ok(())
    }

    /// `K` evenly spaced interior timesteps `k / (K + 1)`.
    pub fn evenly_spaced(k: usize) -> Vec<f64> {
        (1..=k).map(|i| i as f64 / (k + 1) as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub reconstructed: Vec<ActionChunk>,
    /// `distances[k][h]`.
    pub distances: Vec<Vec<f64>>,
    pub branch_prefixes: Vec<usize>,
    pub prefix: usize,
    pub gripper_switch_detected: bool,
    pub noise_seed: u64,
}

impl VerifierReport {
    pub fn max_distance(&self) -> f64 {
        self.distances.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// `tau * draft + (1 - tau) * eps`.
pub fn interpolate(draft: &ActionChunk, eps: &ActionChunk, tau: f64) -> Result<ActionChunk> {
    draft.same_shape(eps)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid("interpolation time", format!("tau = {tau} outside [0, 1]")));
    }
    let v = draft
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(a, e)| tau * a + (1.0 - tau) * e)
        .collect();
    draft.with_values(v)
}

/// Single-step endpoint estimate `x + (1 - tau) v(x, tau)` from the
/// interpolated state `x`.
pub fn reconstruct_endpoint(
    field: &dyn VelocityModel,
    draft: &ActionChunk,
    eps: &ActionChunk,
    tau: f64,
    cache: &ConditioningCache,
    state: &[f64],
) -> Result<ActionChunk> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid("verifier timestep", format!("tau = {tau} outside (0, 1)")));
    }
    let x = interpolate(draft, eps, tau)?;
    let v = field.velocity(&x, tau, cache, state)?;
    let out: Vec<f64> = x
        .as_slice()
        .iter()
        .zip(v.as_slice())
        .map(|(a, b)| a + (1.0 - tau) * b)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("endpoint reconstruction at tau = {tau}")));
    }
    x.with_values(out)
}

/// Length of the leading run of `d_j <= delta`.
pub fn prefix_length(distances: &[f64], delta: f64) -> usize {
    distances.iter().take_while(|&&d| d <= delta).count()
}

#[allow(clippy::too_many_arguments)]
pub fn verify(
    field: &dyn VelocityModel,
    draft: &ActionChunk,
    cache: &ConditioningCache,
    state: &[f64],
    current_gripper: f64,
    cfg: &VerifierConfig,
    rng: &mut Rng,
    mode: ExecMode,
) -> Result<VerifierReport> {
    cfg.validate()?;
    draft.expect_space(Space::Standardized)?;
    let noise_seed: u64 = rng.gen();
    let n = draft.as_slice().len();
    let eps = draft.with_values(normal_vec(&mut stream_rng(noise_seed, &[]), n))?;
    let layout = draft.layout();
    let cont = layout.continuous_dims();
    let branches = par::try_map(mode, &cfg.timesteps, |&tau| {
        let rec = reconstruct_endpoint(field, draft, &eps, tau, cache, state)?;
        let d: Vec<f64> = rec
            .rows()
            .zip(draft.rows())
            .map(|(a, b)| cont_distance(&a[..cont], &b[..cont], cfg.metric))
            .collect();
        Ok::<_, Error>((rec, d))
    })?;
    let (reconstructed, distances): (Vec<_>, Vec<_>) = branches.into_iter().unzip();
    let branch_prefixes: Vec<usize> = distances.iter().map(|d| prefix_length(d, cfg.delta)).collect();
    let prefix = branch_prefixes.iter().copied().min().unwrap_or(0);
    let window = cfg.gripper_window.unwrap_or(draft.horizon());
    let scanned: Vec<&ActionChunk> = std::iter::once(draft).chain(&reconstructed).collect();
    let gripper_switch_detected = detect_gripper_switch(&scanned, current_gripper, window);
    Ok(VerifierReport {
        reconstructed,
        distances,
        branch_prefixes,
        prefix,
        gripper_switch_detected,
        noise_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::ChannelLayout;
    use crate::flowpolicy::{fields, Counted};
    use proptest::prelude::*;

    fn chunk(v: Vec<f64>, h: usize) -> ActionChunk {
        ActionChunk::new(v, h, ChannelLayout::planar(), Space::Standardized).unwrap()
    }

    fn cache() -> ConditioningCache {
        ConditioningCache {
            embedding: vec![],
            captured_round: 0,
            captured_tick: 0,
        }
    }

    fn random_chunk(seed: u64, h: usize) -> ActionChunk {
        chunk(normal_vec(&mut stream_rng(seed, &[]), 3 * h), h)
    }

    #[test]
    fn interpolation_endpoints() {
        let d = chunk(vec![2.0; 6], 2);
        let e = chunk(vec![0.0; 6], 2);
        assert_eq!(interpolate(&d, &e, 0.0).unwrap(), e);
        assert_eq!(interpolate(&d, &e, 1.0).unwrap(), d);
        assert!(interpolate(&d, &e, 0.5).unwrap().as_slice().iter().all(|&x| x == 1.0));
        assert!(interpolate(&d, &chunk(vec![0.0; 9], 3), 0.5).is_err());
    }

    #[test]
    fn zero_field_reconstructs_interpolant() {
        let d = random_chunk(1, 4);
        let e = random_chunk(2, 4);
        let zero = fields::Constant { value: chunk(vec![0.0; 12], 4) };
        let rec = reconstruct_endpoint(&zero, &d, &e, 0.4, &cache(), &[]).unwrap();
        assert_eq!(rec, interpolate(&d, &e, 0.4).unwrap());
        assert!(reconstruct_endpoint(&zero, &d, &e, 1.0, &cache(), &[]).is_err());
        assert!(reconstruct_endpoint(&zero, &d, &e, 0.0, &cache(), &[]).is_err());
    }

    #[test]
    fn oracle_field_accepts_everything() {
        let d = random_chunk(3, 50);
        let oracle = fields::StraightLine { target: d.clone() };
        let cfg = VerifierConfig {
            delta: 1e-9,
            timesteps: VerifierConfig::evenly_spaced(4),
            ..Default::default()
        };
        let r = verify(&oracle, &d, &cache(), &[], 1.0, &cfg, &mut stream_rng(4, &[]), ExecMode::Sequential).unwrap();
        assert!(r.max_distance() <= 1e-9);
        assert_eq!(r.prefix, 50);
    }

    #[test]
    fn hand_distances() {
        assert_eq!(prefix_length(&[0.1, 0.2, 0.05, 0.3], 0.15), 1);
        assert_eq!(prefix_length(&[0.2, 0.0], 0.15), 0);
        assert_eq!(prefix_length(&[0.0, 0.1], 0.15), 2);
        assert_eq!(prefix_length(&[], 0.15), 0);
    }

    #[test]
    fn minimum_over_branches() {
        let h = 10;
        let d = random_chunk(12, h);
        let field = fields::StraightLine { target: random_chunk(13, h) };
        let cfg = VerifierConfig {
            timesteps: VerifierConfig::evenly_spaced(4),
            delta: 1.5,
            ..Default::default()
        };
        let r = verify(&field, &d, &cache(), &[], 1.0, &cfg, &mut stream_rng(5, &[]), ExecMode::Sequential).unwrap();
        assert_eq!(r.prefix, *r.branch_prefixes.iter().min().unwrap());
        for (k, dist) in r.distances.iter().enumerate() {
            assert_eq!(r.branch_prefixes[k], prefix_length(dist, cfg.delta));
        }
    }

    #[test]
    fn verification_costs_k_evaluations() {
        let d = random_chunk(6, 8);
        let oracle = fields::StraightLine { target: d.clone() };
        for k in [1, 2, 4] {
            let counted = Counted::new(&oracle);
            let cfg = VerifierConfig {
                timesteps: VerifierConfig::evenly_spaced(k),
                ..Default::default()
            };
            verify(&counted, &d, &cache(), &[], 1.0, &cfg, &mut stream_rng(7, &[]), ExecMode::Parallel).unwrap();
            assert_eq!(counted.count(), k);
        }
    }

    #[test]
    fn deterministic_under_any_schedule() {
        let d = random_chunk(8, 12);
        let target = random_chunk(9, 12);
        let field = fields::StraightLine { target };
        let cfg = VerifierConfig {
            timesteps: VerifierConfig::evenly_spaced(4),
            ..Default::default()
        };
        let a = verify(&field, &d, &cache(), &[], 1.0, &cfg, &mut stream_rng(10, &[]), ExecMode::Sequential).unwrap();
        let b = verify(&field, &d, &cache(), &[], 1.0, &cfg, &mut stream_rng(10, &[]), ExecMode::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gripper_switch_in_branch_is_reported() {
        let h = 4;
        let d = chunk(vec![0.0, 0.0, -1.0].repeat(h), h);
        // The oracle reconstructs `target` exactly, so only the branches carry
        // the closing command at the last step.
        let mut t = d.as_slice().to_vec();
        t[3 * (h - 1) + 2] = 0.5;
        let field = fields::StraightLine { target: chunk(t, h) };
        let cfg = VerifierConfig::default();
        let r = verify(&field, &d, &cache(), &[], -1.0, &cfg, &mut stream_rng(11, &[]), ExecMode::Sequential).unwrap();
        assert!(r.gripper_switch_detected);
        let windowed = VerifierConfig {
            gripper_window: Some(2),
            ..Default::default()
        };
        let r = verify(&field, &d, &cache(), &[], -1.0, &windowed, &mut stream_rng(11, &[]), ExecMode::Sequential).unwrap();
        assert!(!r.gripper_switch_detected);
    }

    #[test]
    fn config_validation() {
        assert!(VerifierConfig::default().validate().is_ok());
        let bad = |t: Vec<f64>, d: f64| VerifierConfig {
            timesteps: t,
            delta: d,
            ..Default::default()
        };
        assert!(bad(vec![], 0.1).validate().is_err());
        assert!(bad(vec![0.0], 0.1).validate().is_err());
        assert!(bad(vec![0.5, 0.3], 0.1).validate().is_err());
        assert!(bad(vec![0.5], -0.1).validate().is_err());
    }

    #[test]
    fn exhaustive_binary_patterns() {
        for h in 0..=8usize {
            for mask in 0u32..(1 << h) {
                let d: Vec<f64> = (0..h).map(|j| if mask >> j & 1 == 1 { 0.0 } else { 1.0 }).collect();
                let closed_form: usize = (0..h).map(|i| (0..=i).map(|j| usize::from(d[j] <= 0.5)).product::<usize>()).sum();
                assert_eq!(prefix_length(&d, 0.5), closed_form);
            }
        }
    }

    proptest! {
        #[test]
        fn prefix_monotone_in_delta(d in prop::collection::vec(0.0f64..1.0, 0..20), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(prefix_length(&d, lo) <= prefix_length(&d, hi));
        }

        #[test]
        fn adding_timesteps_never_grows_prefix(seed in 0u64..1000) {
            let d = random_chunk(seed, 6);
            let field = fields::StraightLine { target: random_chunk(seed + 1, 6) };
            let run = |ts: Vec<f64>| {
                let cfg = VerifierConfig { timesteps: ts, delta: 1.0, ..Default::default() };
                verify(&field, &d, &cache(), &[], 1.0, &cfg, &mut stream_rng(seed, &[2]), ExecMode::Sequential).unwrap().prefix
            };
            prop_assert!(run(vec![0.25, 0.5, 0.75]) <= run(vec![0.25, 0.75]));
        }
    }
}
