//! Built-in checks that need no trained model: the verifier against an
//! analytic field, the prefix rule against brute force, Euler identities and
//! finite-difference gradients.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionChunk, ChannelLayout, Space, Standardizer};
use crate::draft::{self, chunk_loss, prefix_weights, DraftModel, DraftModelConfig};
use crate::envsim::{STATE_DIM, WORLD_DIM};
use crate::flowpolicy::{self, denoise, denoise_from, fields, ConditioningCache, DenoiseConfig, MainModelConfig, MainPolicy, Observation};
use crate::nn::{Gradients, Mlp};
use crate::par::ExecMode;
use crate::rng::{normal_vec, stream_rng, Rng};
use crate::verifier::{prefix_length, verify, VerifierConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn empty_cache() -> ConditioningCache {
    ConditioningCache {
        embedding: Vec::new(),
        captured_round: 0,
        captured_tick: 0,
    }
}

fn random_chunk(seed: u64, horizon: usize) -> ActionChunk {
    let layout = ChannelLayout::planar();
    ActionChunk::new(normal_vec(&mut stream_rng(seed, &[]), horizon * layout.dim()), horizon, layout, Space::Standardized)
        .expect("valid shape")
}

/// Random drafts verified against the straight-line field through them.
pub fn oracle_verifier(cases: u64, horizon: usize) -> Check {
    let mut worst: f64 = 0.0;
    let mut short = Vec::new();
    for k in [1usize, 2, 4] {
        let cfg = VerifierConfig {
            timesteps: VerifierConfig::evenly_spaced(k),
            ..Default::default()
        };
        for seed in 0..cases {
            let d = random_chunk(seed, horizon);
            let field = fields::StraightLine { target: d.clone() };
            match verify(&field, &d, &empty_cache(), &[], 1.0, &cfg, &mut stream_rng(seed, &[1]), ExecMode::Sequential) {
                Ok(r) => {
                    worst = worst.max(r.max_distance());
                    if r.prefix != horizon {
                        short.push((k, seed, r.prefix));
                    }
                }
                Err(_) => short.push((k, seed, usize::MAX)),
            }
        }
    }
    check(
        "oracle verifier",
        short.is_empty() && worst <= 1e-9,
        format!("{} cases x K in {{1,2,4}}, H={horizon}: max distance {worst:.3e}, short prefixes {short:?}", cases),
    )
}

fn brute_prefix(d: &[f64], delta: f64) -> usize {
    let mut best = 0;
    for l in 0..=d.len() {
        if d[..l].iter().all(|&x| x <= delta) {
            best = l;
        }
    }
    best
}

/// Every pass/fail pattern of length 8 plus random real vectors.
pub fn prefix_brute_force(random_cases: usize) -> Check {
    let mut mismatches = 0usize;
    for mask in 0u32..256 {
        let d: Vec<f64> = (0..8).map(|i| if mask >> i & 1 == 1 { 1.0 } else { 0.0 }).collect();
        if prefix_length(&d, 0.5) != brute_prefix(&d, 0.5) {
            mismatches += 1;
        }
    }
    let mut rng = stream_rng(2024, &[]);
    for _ in 0..random_cases {
        let n = rng.gen_range(0..=20);
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.3)).collect();
        let delta = rng.gen_range(0.0..0.3);
        if prefix_length(&d, delta) != brute_prefix(&d, delta) {
            mismatches += 1;
        }
    }
    check(
        "prefix brute force",
        mismatches == 0,
        format!("256 binary patterns + {random_cases} random vectors, {mismatches} mismatches"),
    )
}

/// Constant-field Euler is exact; the straight-line field lands on target.
pub fn euler_identities() -> Check {
    let c = random_chunk(11, 10);
    let a0 = random_chunk(12, 10);
    let mut worst_const: f64 = 0.0;
    let mut worst_line: f64 = 0.0;
    for n in [1usize, 10] {
        let cfg = DenoiseConfig { num_steps: n };
        let out = denoise_from(&fields::Constant { value: c.clone() }, a0.clone(), &empty_cache(), &[], &cfg).expect("denoise");
        for ((o, a), v) in out.as_slice().iter().zip(a0.as_slice()).zip(c.as_slice()) {
            worst_const = worst_const.max((o - (a + v)).abs());
        }
        let out = denoise(&fields::StraightLine { target: c.clone() }, &empty_cache(), &[], &cfg, &mut stream_rng(n as u64, &[])).expect("denoise");
        for (o, t) in out.as_slice().iter().zip(c.as_slice()) {
            worst_line = worst_line.max((o - t).abs());
        }
    }
    check(
        "euler identities",
        worst_const <= 1e-12 && worst_line <= 1e-9,
        format!("constant-field error {worst_const:.3e}, straight-line error {worst_line:.3e}"),
    )
}

fn random_obs(rng: &mut Rng) -> Observation {
    Observation {
        world: normal_vec(rng, WORLD_DIM),
        task_id: rng.gen_range(0..2),
        robot_state: normal_vec(rng, STATE_DIM),
    }
}

/// Relative error between central differences and `grads` at `coords`
/// random parameter coordinates of the net selected by `net`.
fn fd_worst<P: Clone>(
    base: &P,
    net: impl Fn(&mut P) -> &mut Mlp,
    grads: &Gradients,
    loss: impl Fn(&P) -> f64,
    coords: usize,
    rng: &mut Rng,
) -> f64 {
    let h = 1e-5;
    let mut probe = base.clone();
    let layers = net(&mut probe).num_layers();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let l = rng.gen_range(0..layers);
        let bias = rng.gen_bool(0.3);
        let (w, b) = (&grads.weights[l], &grads.biases[l]);
        let (i, j) = if bias { (rng.gen_range(0..b.len()), 0) } else { (rng.gen_range(0..w.nrows()), rng.gen_range(0..w.ncols())) };
        let shifted = |d: f64| {
            let mut p = base.clone();
            let m = net(&mut p);
            if bias {
                m.biases_mut()[l][i] += d;
            } else {
                m.weights_mut()[l][[i, j]] += d;
            }
            loss(&p)
        };
        let num = (shifted(h) - shifted(-h)) / (2.0 * h);
        let ana = if bias { b[i] } else { w[[i, j]] };
        worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
    }
    worst
}

/// Finite-difference checks of encoder, field and draft gradients, each at
/// `points` random examples with a few parameter coordinates per example.
pub fn gradient_checks(points: usize) -> Vec<Check> {
    let layout = ChannelLayout::planar();
    let horizon = 6;
    let chunk = horizon * layout.dim();
    let mut rng = stream_rng(77, &[]);
    let main_cfg = MainModelConfig {
        embed_dim: 6,
        encoder_hidden: vec![10],
        field_hidden: vec![16, 16],
        time_floor: 0.1,
    };
    let norm = |d: usize| Standardizer::identity(d);
    let policy = MainPolicy::new(&main_cfg, layout, horizon, 2, norm(WORLD_DIM), norm(STATE_DIM), &mut rng).expect("policy");
    let draft_model = DraftModel::new(&DraftModelConfig { hidden: vec![12] }, layout, horizon, 2, norm(WORLD_DIM), norm(STATE_DIM), &mut rng)
        .expect("draft");
    let (mut enc_worst, mut field_worst, mut draft_worst): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..points {
        let obs = random_obs(&mut rng);
        let target = normal_vec(&mut rng, chunk);
        let eps = normal_vec(&mut rng, chunk);
        let tau = rng.gen_range(0.0..1.0);
        let (_, g_enc, g_field) = flowpolicy::example_gradients(&policy, &obs, &target, &eps, tau).expect("gradients");
        let flow_loss = |p: &MainPolicy| flowpolicy::example_gradients(p, &obs, &target, &eps, tau).expect("loss").0;
        enc_worst = enc_worst.max(fd_worst(&policy, |p| &mut p.encoder.net, &g_enc, flow_loss, 3, &mut rng));
        field_worst = field_worst.max(fd_worst(&policy, |p| &mut p.field.net, &g_field, flow_loss, 3, &mut rng));

        let weights = prefix_weights(rng.gen_range(1..=horizon), horizon, 0.9, 0.1).expect("weights");
        let (_, g) = draft::example_gradients(&draft_model, &obs, &target, &weights, 1.0).expect("gradients");
        let draft_loss = |m: &DraftModel| {
            let pred = m.net.predict(&m.input_row(&obs).expect("input")).expect("forward");
            chunk_loss(&pred, &target, &weights, layout.dim(), 1.0)
        };
        draft_worst = draft_worst.max(fd_worst(&draft_model, |m| &mut m.net, &g, draft_loss, 3, &mut rng));
    }
    [("encoder gradients", enc_worst), ("field gradients", field_worst), ("draft gradients", draft_worst)]
        .into_iter()
        .map(|(name, worst)| check(name, worst < 1e-4, format!("{points} random points, max relative error {worst:.3e}")))
        .collect()
}

pub fn run_all() -> Vec<Check> {
    let mut checks = vec![oracle_verifier(100, 50), prefix_brute_force(10_000), euler_identities()];
    checks.extend(gradient_checks(20));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn brute_force_reference() {
        assert_eq!(brute_prefix(&[0.1, 0.9, 0.1], 0.5), 1);
        assert_eq!(brute_prefix(&[], 0.5), 0);
    }
}
