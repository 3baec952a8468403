//! Planar conveyor-intercept task, its scripted expert, and demonstration
//! datasets.
//!
//! An object rides a belt along `+x` at `y = belt_y`. A point gripper must
//! close on it, carry it to a bin, and open over the bin before the object
//! leaves the reachable stretch of belt. Positions are in environment units,
//! time in control ticks.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actions::{ActionChunk, ChannelLayout, Space, Standardizer};
use crate::error::{Error, Result};
use crate::flowpolicy::Observation;
use crate::par::{self, ExecMode};
use crate::rng::{stream, stream_rng, Rng};

pub const WORLD_DIM: usize = 9;
pub const STATE_DIM: usize = 3;
pub const GRIPPER_OPEN: f64 = -1.0;
pub const GRIPPER_CLOSED: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectVariant {
    /// Wide object with a generous grasp tolerance.
    Large,
    /// Thin object; tighter grasp and release tolerance.
    Small,
}

impl ObjectVariant {
    pub const ALL: [ObjectVariant; 2] = [ObjectVariant::Large, ObjectVariant::Small];

    pub fn task_id(self) -> usize {
        match self {
            ObjectVariant::Large => 0,
            ObjectVariant::Small => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectVariant::Large => "large",
            ObjectVariant::Small => "small",
        }
    }
}

/// Named belt speeds in m/min, converted to units/tick by
/// [`EnvConfig::speed_scale`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedGrid {
    pub demo: f64,
    pub medium: f64,
    pub high: f64,
    pub extra_high: f64,
}

impl Default for SpeedGrid {
    fn default() -> Self {
        Self {
            demo: 6.0,
            medium: 10.0,
            high: 13.0,
            extra_high: 15.0,
        }
    }
}

impl SpeedGrid {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("demo", self.demo),
            ("medium", self.medium),
            ("high", self.high),
            ("extra_high", self.extra_high),
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.named().iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.named();
        if v.windows(2).all(|w| w[0].1 < w[1].1) && v[0].1 >= 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("speed grid", "speeds must be non-negative and strictly increasing"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Units per tick for a belt speed of 1 m/min.
    pub speed_scale: f64,
    /// Gripper speed limit (units per tick, Euclidean).
    pub gripper_vmax: f64,
    /// Fraction of `gripper_vmax` the expert cruises at.
    pub expert_speed_fraction: f64,
    /// Gap below which the expert switches from intercept to tracking.
    pub track_radius: f64,
    /// Per-tick contraction of the tracking error.
    pub track_decay: f64,
    /// Gap at which the expert commands the gripper closed.
    pub close_gap: f64,
    pub grasp_radius_large: f64,
    pub grasp_radius_small: f64,
    pub belt_y: f64,
    pub object_x0: [f64; 2],
    pub gripper_x0: [f64; 2],
    pub gripper_y0: [f64; 2],
    pub bin_x: [f64; 2],
    pub bin_y: [f64; 2],
    /// Object is lost once it passes this x while ungrasped.
    pub belt_exit_x: f64,
    pub bounds_x: [f64; 2],
    pub bounds_y: [f64; 2],
    pub max_ticks: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            speed_scale: 0.00075,
            gripper_vmax: 0.015,
            expert_speed_fraction: 0.9,
            track_radius: 0.1,
            track_decay: 0.7,
            close_gap: 0.004,
            grasp_radius_large: 0.055,
            grasp_radius_small: 0.04,
            belt_y: 0.0,
            object_x0: [-1.6, -1.2],
            gripper_x0: [-0.3, 0.3],
            gripper_y0: [2.0, 2.4],
            bin_x: [0.6, 1.0],
            bin_y: [2.2, 2.6],
            belt_exit_x: 2.5,
            bounds_x: [-3.0, 3.0],
            bounds_y: [-0.5, 3.0],
            max_ticks: 1200,
        }
    }
}

impl EnvConfig {
    pub fn grasp_radius(&self, variant: ObjectVariant) -> f64 {
        match variant {
            ObjectVariant::Large => self.grasp_radius_large,
            ObjectVariant::Small => self.grasp_radius_small,
        }
    }

    pub fn belt_speed(&self, m_per_min: f64) -> f64 {
        m_per_min * self.speed_scale
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("env.speed_scale", self.speed_scale),
            ("env.gripper_vmax", self.gripper_vmax),
            ("env.grasp_radius_large", self.grasp_radius_large),
            ("env.grasp_radius_small", self.grasp_radius_small),
            ("env.close_gap", self.close_gap),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config {
                    path: name.into(),
                    message: format!("must be positive, got {v}"),
                });
            }
        }
        if !(0.0..1.0).contains(&self.track_decay) {
            return Err(Error::Config {
                path: "env.track_decay".into(),
                message: "must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Grasp,
    Transport,
    Release,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    MissedGrasp,
    Dropped,
    ObjectExited,
    Timeout,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        self == Outcome::Success
    }
}

/// Randomized initial conditions for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSetup {
    pub variant: ObjectVariant,
    pub belt_speed: f64,
    pub object_x: f64,
    pub gripper: [f64; 2],
    pub bin: [f64; 2],
}

impl EpisodeSetup {
    pub fn sample(cfg: &EnvConfig, variant: ObjectVariant, m_per_min: f64, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[stream::EPISODE]);
        let mut u = |r: [f64; 2]| if r[1] > r[0] { rng.gen_range(r[0]..r[1]) } else { r[0] };
        Self {
            variant,
            belt_speed: cfg.belt_speed(m_per_min),
            object_x: u(cfg.object_x0),
            gripper: [u(cfg.gripper_x0), u(cfg.gripper_y0)],
            bin: [u(cfg.bin_x), u(cfg.bin_y)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConveyorEnv {
    cfg: EnvConfig,
    setup: EpisodeSetup,
    object: [f64; 2],
    object_vel: f64,
    gripper: [f64; 2],
    closed: bool,
    holding: bool,
    tick: u64,
    outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub phase: Phase,
    pub outcome: Option<Outcome>,
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

impl ConveyorEnv {
    pub fn new(cfg: EnvConfig, setup: EpisodeSetup) -> Self {
        Self {
            object: [setup.object_x, cfg.belt_y],
            object_vel: setup.belt_speed,
            gripper: setup.gripper,
            closed: false,
            holding: false,
            tick: 0,
            outcome: None,
            cfg,
            setup,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn setup(&self) -> &EpisodeSetup {
        &self.setup
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn object(&self) -> [f64; 2] {
        self.object
    }

    pub fn gripper(&self) -> [f64; 2] {
        self.gripper
    }

    pub fn holding(&self) -> bool {
        self.holding
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn grasp_radius(&self) -> f64 {
        self.cfg.grasp_radius(self.setup.variant)
    }

    pub fn gripper_command(&self) -> f64 {
        if self.closed {
            GRIPPER_CLOSED
        } else {
            GRIPPER_OPEN
        }
    }

    /// World features are what a camera sees: object and bin positions
    /// relative to the gripper, the belt velocity estimate, and the same
    /// offsets squashed by `tanh(d / track_radius)` so centimetre-scale gaps
    /// stay resolvable next to metre-scale ones.
    pub fn observe(&self) -> Observation {
        let to_obj = sub(self.object, self.gripper);
        let to_bin = sub(self.setup.bin, self.gripper);
        let near = |d: f64| (d / self.cfg.track_radius).tanh();
        Observation {
            world: vec![
                to_obj[0],
                to_obj[1],
                self.object_vel,
                to_bin[0],
                to_bin[1],
                near(to_obj[0]),
                near(to_obj[1]),
                near(to_bin[0]),
                near(to_bin[1]),
            ],
            task_id: self.setup.variant.task_id(),
            robot_state: vec![self.gripper[0], self.gripper[1], self.gripper_command()],
        }
    }

    pub fn phase(&self) -> Phase {
        if self.outcome.is_some() {
            return Phase::Done;
        }
        if self.holding {
            if norm(sub(self.setup.bin, self.gripper)) <= self.cfg.track_radius {
                Phase::Release
            } else {
                Phase::Transport
            }
        } else if norm(sub(self.object, self.gripper)) <= 2.0 * self.cfg.track_radius {
            Phase::Grasp
        } else {
            Phase::Approach
        }
    }

    /// Advances one control tick under a raw per-step action
    /// `[dx, dy, (rotation..), gripper]`. Only the first two channels move
    /// the gripper; the last channel is the commanded gripper state,
    /// thresholded at zero.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.outcome.is_some() {
            return Err(Error::Env {
                tick: self.tick,
                message: "step called on a finished episode".into(),
            });
        }
        if action.len() < 3 || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Env {
                tick: self.tick,
                message: format!("malformed action {action:?}"),
            });
        }
        let mut dp = [action[0], action[1]];
        let n = norm(dp);
        if n > self.cfg.gripper_vmax {
            let k = self.cfg.gripper_vmax / n;
            dp = [dp[0] * k, dp[1] * k];
        }
        let before = self.gripper;
        self.gripper[0] = (self.gripper[0] + dp[0]).clamp(self.cfg.bounds_x[0], self.cfg.bounds_x[1]);
        self.gripper[1] = (self.gripper[1] + dp[1]).clamp(self.cfg.bounds_y[0], self.cfg.bounds_y[1]);

        if self.holding {
            self.object_vel = self.gripper[0] - before[0];
            self.object = self.gripper;
        } else {
            self.object_vel = self.setup.belt_speed;
            self.object[0] += self.setup.belt_speed;
        }
        self.tick += 1;

        let want_closed = *action.last().unwrap() > 0.0;
        let r = self.grasp_radius();
        if want_closed && !self.closed {
            self.closed = true;
            if norm(sub(self.object, self.gripper)) <= r {
                self.holding = true;
                self.object = self.gripper;
            } else {
                self.outcome = Some(Outcome::MissedGrasp);
            }
        } else if !want_closed && self.closed {
            self.closed = false;
            if self.holding {
                self.holding = false;
                self.outcome = Some(if norm(sub(self.setup.bin, self.gripper)) <= r {
                    Outcome::Success
                } else {
                    Outcome::Dropped
                });
            }
        }
        if self.outcome.is_none() {
            if !self.holding && self.object[0] > self.cfg.belt_exit_x {
                self.outcome = Some(Outcome::ObjectExited);
            } else if self.tick >= self.cfg.max_ticks {
                self.outcome = Some(Outcome::Timeout);
            }
        }
        Ok(StepResult {
            observation: self.observe(),
            phase: self.phase(),
            outcome: self.outcome,
        })
    }

    /// One tick with the gripper held in place and its state unchanged, as
    /// happens while the controller blocks on inference.
    pub fn hold(&mut self) -> Result<StepResult> {
        let mut a = [0.0; 3];
        a[2] = self.gripper_command();
        self.step(&a)
    }

    /// The scripted expert's next raw action `[dx, dy, gripper]`.
    pub fn expert_action(&self) -> [f64; 3] {
        let c = &self.cfg;
        let cruise = c.expert_speed_fraction * c.gripper_vmax;
        if self.holding {
            let d = sub(self.setup.bin, self.gripper);
            let dist = norm(d);
            if dist <= cruise {
                return [d[0], d[1], GRIPPER_OPEN];
            }
            return [d[0] * cruise / dist, d[1] * cruise / dist, GRIPPER_CLOSED];
        }
        let v = self.setup.belt_speed;
        let e = sub(self.object, self.gripper);
        let gap = norm(e);
        if gap <= c.track_radius {
            // contract the error by `track_decay` while matching belt speed
            let k = 1.0 - c.track_decay;
            let mut u = [e[0] * k + v, e[1] * k];
            let un = norm(u);
            if un > c.gripper_vmax {
                u = [u[0] * c.gripper_vmax / un, u[1] * c.gripper_vmax / un];
            }
            let next_gap = norm([e[0] + v - u[0], e[1] - u[1]]);
            let g = if next_gap <= c.close_gap {
                GRIPPER_CLOSED
            } else {
                GRIPPER_OPEN
            };
            return [u[0], u[1], g];
        }
        // straight-line intercept of the object's future belt position
        let s2 = cruise * cruise;
        let a = s2 - v * v;
        let t = if a > 1e-12 {
            (e[0] * v + (e[0] * e[0] * v * v + a * gap * gap).sqrt()) / a
        } else {
            gap / cruise
        };
        let aim = [e[0] + v * t, e[1]];
        let an = norm(aim).max(1e-12);
        let step = cruise.min(an);
        [aim[0] * step / an, aim[1] * step / an, GRIPPER_OPEN]
    }

    /// Rolls the expert forward `horizon` steps on a copy of the environment.
    /// Steps after the episode ends hold position with the last gripper
    /// command.
    pub fn expert_chunk(&self, horizon: usize, layout: ChannelLayout) -> Result<ActionChunk> {
        self.expert_chunk_masked(horizon, layout).map(|(c, _)| c)
    }

    /// As [`expert_chunk`](Self::expert_chunk), also flagging which steps fall
    /// before the end of the simulated episode.
    pub fn expert_chunk_masked(&self, horizon: usize, layout: ChannelLayout) -> Result<(ActionChunk, Vec<bool>)> {
        let mut sim = self.clone();
        let d = layout.dim();
        let mut values = Vec::with_capacity(horizon * d);
        let mut mask = Vec::with_capacity(horizon);
        let mut last_g = self.gripper_command();
        for _ in 0..horizon {
            let live = sim.outcome.is_none();
            let a = if live {
                let a = sim.expert_action();
                sim.step(&a)?;
                a
            } else {
                [0.0, 0.0, last_g]
            };
            last_g = a[2];
            mask.push(live);
            values.extend(pack_action(&a, layout));
        }
        Ok((ActionChunk::new(values, horizon, layout, Space::Raw)?, mask))
    }
}

/// Maps a planar `[dx, dy, g]` action into a layout (extra channels zero).
pub fn pack_action(a: &[f64; 3], layout: ChannelLayout) -> Vec<f64> {
    let mut row = vec![0.0; layout.dim()];
    row[..2.min(layout.continuous_dims())].copy_from_slice(&a[..2.min(layout.continuous_dims())]);
    row[layout.gripper_index()] = a[2];
    row
}

/// Extracts the planar part of a per-step action in any layout.
pub fn unpack_action(row: &[f64], layout: ChannelLayout) -> [f64; 3] {
    let dx = row[0];
    let dy = if layout.continuous_dims() > 1 { row[1] } else { 0.0 };
    [dx, dy, row[layout.gripper_index()]]
}

/// Runs the expert closed-loop with zero latency.
pub fn run_expert(cfg: &EnvConfig, setup: EpisodeSetup, layout: ChannelLayout) -> Result<Demonstration> {
    let mut env = ConveyorEnv::new(cfg.clone(), setup);
    let mut observations = vec![env.observe()];
    let mut actions = Vec::new();
    while env.outcome().is_none() {
        let a = env.expert_action();
        let r = env.step(&a)?;
        actions.push(pack_action(&a, layout));
        observations.push(r.observation);
    }
    Ok(Demonstration {
        setup,
        observations,
        actions,
        outcome: env.outcome().unwrap(),
        seed: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub setup: EpisodeSetup,
    /// `observations[t]` precedes `actions[t]`; one extra terminal entry.
    pub observations: Vec<Observation>,
    pub actions: Vec<Vec<f64>>,
    pub outcome: Outcome,
    pub seed: u64,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Re-executes the recorded actions from the initial state and checks the
    /// observations match bit-for-bit.
    pub fn replay_matches(&self, cfg: &EnvConfig) -> Result<bool> {
        let mut env = ConveyorEnv::new(cfg.clone(), self.setup);
        if env.observe() != self.observations[0] {
            return Ok(false);
        }
        for (t, a) in self.actions.iter().enumerate() {
            let r = env.step(a)?;
            if r.observation != self.observations[t + 1] {
                return Ok(false);
            }
        }
        Ok(env.outcome() == Some(self.outcome))
    }
}

/// One supervised example: observation at a replanning point and the next
/// `H` expert actions (raw space), with a validity mask for padded steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub obs: Observation,
    pub target: ActionChunk,
    pub mask: Vec<bool>,
    pub episode: usize,
    pub tick: usize,
}

/// Disturbances injected while recording demonstrations so the data covers
/// states off the expert's nominal path. Labels stay clean: every target is
/// the unperturbed expert chunk from the state actually reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    /// Std of Gaussian noise on executed motions, as a fraction of
    /// `gripper_vmax`.
    pub action_noise: f64,
    /// Per-tick probability of a stall (the robot holds still).
    pub stall_prob: f64,
    pub max_stall: usize,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            action_noise: 0.3,
            stall_prob: 0.03,
            max_stall: 6,
        }
    }
}

impl Perturbation {
    pub fn none() -> Self {
        Self {
            action_noise: 0.0,
            stall_prob: 0.0,
            max_stall: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub episodes: usize,
    /// Demonstration belt speeds are drawn uniformly from this range (m/min).
    pub speed_range: [f64; 2],
    pub variants: Vec<ObjectVariant>,
    pub horizon: usize,
    pub replan: usize,
    /// A training pair is recorded every `stride` ticks.
    pub stride: usize,
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            speed_range: [6.0, 15.0],
            variants: ObjectVariant::ALL.to_vec(),
            horizon: 50,
            replan: 12,
            stride: 3,
            perturbation: Perturbation::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub layout: ChannelLayout,
    pub horizon: usize,
    pub replan: usize,
    pub demos: Vec<Demonstration>,
    pub pairs: Vec<TrainingPair>,
    /// Action standardizer fitted on the valid steps of every pair.
    pub action_norm: Standardizer,
    /// Seeds of expert episodes that failed and were left out.
    pub excluded: Vec<u64>,
}

/// Slices a demonstration into `(obs, next H actions)` pairs every `stride`
/// executed steps, padding past the episode end with a hold action.
pub fn slice_demo(demo: &Demonstration, episode: usize, horizon: usize, stride: usize, layout: ChannelLayout) -> Result<Vec<TrainingPair>> {
    let d = layout.dim();
    let gi = layout.gripper_index();
    let mut pairs = Vec::new();
    for t in (0..demo.len()).step_by(stride) {
        let mut values = Vec::with_capacity(horizon * d);
        let mut mask = Vec::with_capacity(horizon);
        let mut last = demo.actions[t][gi];
        for h in 0..horizon {
            match demo.actions.get(t + h) {
                Some(a) => {
                    values.extend_from_slice(a);
                    last = a[gi];
                    mask.push(true);
                }
                None => {
                    let mut hold = vec![0.0; d];
                    hold[gi] = last;
                    values.extend(hold);
                    mask.push(false);
                }
            }
        }
        pairs.push(TrainingPair {
            obs: demo.observations[t].clone(),
            target: ActionChunk::new(values, horizon, layout, Space::Raw)?,
            mask,
            episode,
            tick: t,
        });
    }
    Ok(pairs)
}

/// Records one perturbed expert episode together with clean expert-chunk
/// labels every `stride` ticks.
pub fn collect_demo(
    cfg: &EnvConfig,
    setup: EpisodeSetup,
    layout: ChannelLayout,
    horizon: usize,
    stride: usize,
    perturb: &Perturbation,
    rng: &mut Rng,
) -> Result<(Demonstration, Vec<TrainingPair>)> {
    let mut env = ConveyorEnv::new(cfg.clone(), setup);
    let mut observations = vec![env.observe()];
    let mut actions: Vec<Vec<f64>> = Vec::new();
    let mut pairs = Vec::new();
    let noise = Normal::new(0.0, perturb.action_noise * cfg.gripper_vmax)
        .map_err(|e| Error::invalid("action noise", e.to_string()))?;
    let mut stall_left = 0usize;
    while env.outcome().is_none() {
        let t = actions.len();
        if t % stride == 0 {
            let (target, mask) = env.expert_chunk_masked(horizon, layout)?;
            pairs.push(TrainingPair {
                obs: env.observe(),
                target,
                mask,
                episode: 0,
                tick: t,
            });
        }
        if stall_left == 0 && perturb.max_stall > 0 && rng.gen::<f64>() < perturb.stall_prob {
            stall_left = rng.gen_range(1..=perturb.max_stall);
        }
        let a = if stall_left > 0 {
            stall_left -= 1;
            [0.0, 0.0, env.gripper_command()]
        } else {
            let mut a = env.expert_action();
            if perturb.action_noise > 0.0 {
                a[0] += noise.sample(rng);
                a[1] += noise.sample(rng);
            }
            a
        };
        let r = env.step(&a)?;
        actions.push(pack_action(&a, layout));
        observations.push(r.observation);
    }
    let demo = Demonstration {
        setup,
        observations,
        actions,
        outcome: env.outcome().expect("loop exits on a terminal outcome"),
        seed: 0,
    };
    Ok((demo, pairs))
}

pub fn generate_dataset(env_cfg: &EnvConfig, cfg: &DatasetConfig, layout: ChannelLayout, mode: ExecMode) -> Result<Dataset> {
    if cfg.episodes == 0 || cfg.variants.is_empty() {
        return Err(Error::invalid("dataset", "need at least one episode and one variant"));
    }
    if cfg.replan == 0 || cfg.replan > cfg.horizon {
        return Err(Error::invalid("dataset", "replan must lie in 1..=horizon"));
    }
    if cfg.stride == 0 {
        return Err(Error::invalid("dataset", "stride must be positive"));
    }
    let runs = par::map_range(mode, cfg.episodes, |i| {
        let seed = crate::rng::derive_seed(cfg.seed, &[stream::DATASET, i as u64]);
        let mut rng = stream_rng(seed, &[]);
        let [lo, hi] = cfg.speed_range;
        let speed = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let variant = cfg.variants[i % cfg.variants.len()];
        let setup = EpisodeSetup::sample(env_cfg, variant, speed, seed);
        collect_demo(env_cfg, setup, layout, cfg.horizon, cfg.stride, &cfg.perturbation, &mut rng).map(|(mut d, p)| {
            d.seed = seed;
            (d, p)
        })
    });
    let mut demos = Vec::new();
    let mut pairs = Vec::new();
    let mut excluded = Vec::new();
    for run in runs {
        let (demo, demo_pairs) = run?;
        if demo.outcome.is_success() {
            let episode = demos.len();
            pairs.extend(demo_pairs.into_iter().map(|mut p| {
                p.episode = episode;
                p
            }));
            demos.push(demo);
        } else {
            excluded.push(demo.seed);
        }
    }
    if demos.is_empty() {
        return Err(Error::invalid("dataset", "every expert episode failed"));
    }
    let action_norm = Standardizer::fit(
        layout.dim(),
        pairs.iter().flat_map(|p| {
            p.target
                .rows()
                .zip(&p.mask)
                .filter(|(_, &m)| m)
                .map(|(r, _)| r)
        }),
    )?;
    Ok(Dataset {
        layout,
        horizon: cfg.horizon,
        replan: cfg.replan,
        demos,
        pairs,
        action_norm,
        excluded,
    })
}

/// Zero-latency expert success rate over seeded episodes.
pub fn expert_success_rate(cfg: &EnvConfig, variant: ObjectVariant, m_per_min: f64, seeds: &[u64], mode: ExecMode) -> Result<f64> {
    let wins = par::try_map(mode, seeds, |&s| {
        run_expert(cfg, EpisodeSetup::sample(cfg, variant, m_per_min, s), ChannelLayout::planar())
            .map(|d| d.outcome.is_success())
    })?;
    Ok(wins.iter().filter(|&&w| w).count() as f64 / seeds.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(speed: f64, seed: u64) -> EpisodeSetup {
        EpisodeSetup::sample(&EnvConfig::default(), ObjectVariant::Large, speed, seed)
    }

    #[test]
    fn zero_action_advances_object_only() {
        let cfg = EnvConfig::default();
        let s = setup(6.0, 1);
        let mut env = ConveyorEnv::new(cfg.clone(), s);
        let g0 = env.gripper();
        let x0 = env.object()[0];
        env.step(&[0.0, 0.0, GRIPPER_OPEN]).unwrap();
        assert_eq!(env.gripper(), g0);
        assert!((env.object()[0] - x0 - cfg.belt_speed(6.0)).abs() < 1e-15);
    }

    #[test]
    fn close_within_radius_grasps() {
        let cfg = EnvConfig::default();
        let mut s = setup(0.0, 1);
        s.gripper = [s.object_x + 0.01, cfg.belt_y];
        let mut env = ConveyorEnv::new(cfg, s);
        let r = env.step(&[0.0, 0.0, GRIPPER_CLOSED]).unwrap();
        assert!(env.holding());
        assert_eq!(r.phase, Phase::Transport);
        env.step(&[0.01, 0.01, GRIPPER_CLOSED]).unwrap();
        assert_eq!(env.object(), env.gripper());
    }

    #[test]
    fn close_out_of_range_fails() {
        let mut env = ConveyorEnv::new(EnvConfig::default(), setup(6.0, 2));
        let r = env.step(&[0.0, 0.0, GRIPPER_CLOSED]).unwrap();
        assert_eq!(r.outcome, Some(Outcome::MissedGrasp));
        assert!(env.step(&[0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn object_exit_is_terminal() {
        let mut cfg = EnvConfig::default();
        cfg.belt_exit_x = -1.0;
        let mut s = setup(6.0, 3);
        s.object_x = -1.0 + 1e-4;
        let mut env = ConveyorEnv::new(cfg, s);
        let r = env.step(&[0.0, 0.0, GRIPPER_OPEN]).unwrap();
        assert_eq!(r.outcome, Some(Outcome::ObjectExited));
    }

    #[test]
    fn stationary_reachable_object_is_solved() {
        let d = run_expert(&EnvConfig::default(), setup(0.0, 4), ChannelLayout::planar()).unwrap();
        assert_eq!(d.outcome, Outcome::Success);
    }

    #[test]
    fn expert_is_perfect_at_demo_speed() {
        let cfg = EnvConfig::default();
        let seeds: Vec<u64> = (0..50).collect();
        for v in ObjectVariant::ALL {
            let sr = expert_success_rate(&cfg, v, 6.0, &seeds, ExecMode::Parallel).unwrap();
            assert_eq!(sr, 1.0, "{v:?}");
        }
    }

    #[test]
    fn expert_gripper_switches_exactly_twice() {
        let cfg = EnvConfig::default();
        for seed in 0..20 {
            let d = run_expert(&cfg, setup(6.0 + (seed % 10) as f64, seed), ChannelLayout::planar()).unwrap();
            assert!(d.outcome.is_success());
            let signs: Vec<bool> = d.actions.iter().map(|a| a[2] > 0.0).collect();
            let switches = signs.windows(2).filter(|w| w[0] != w[1]).count();
            assert_eq!(switches + usize::from(signs[0]), 2);
        }
    }

    #[test]
    fn expert_success_non_increasing_in_speed() {
        let cfg = EnvConfig::default();
        let seeds: Vec<u64> = (100..140).collect();
        for v in ObjectVariant::ALL {
            let rates: Vec<f64> = SpeedGrid::default()
                .named()
                .iter()
                .map(|(_, s)| expert_success_rate(&cfg, v, *s, &seeds, ExecMode::Sequential).unwrap())
                .collect();
            assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
        }
    }

    #[test]
    fn replay_reproduces_observations() {
        let cfg = EnvConfig::default();
        let d = run_expert(&cfg, setup(10.0, 5), ChannelLayout::planar()).unwrap();
        assert!(d.replay_matches(&cfg).unwrap());
        let mut bad = d.clone();
        bad.actions[3][0] += 1e-3;
        assert!(!bad.replay_matches(&cfg).unwrap());
    }

    #[test]
    fn transport_keeps_object_on_gripper() {
        let cfg = EnvConfig::default();
        let mut env = ConveyorEnv::new(cfg, setup(13.0, 6));
        while env.outcome().is_none() {
            let a = env.expert_action();
            env.step(&a).unwrap();
            if env.holding() {
                assert_eq!(env.object(), env.gripper());
            }
        }
    }

    #[test]
    fn expert_chunk_matches_closed_loop_rollout() {
        let cfg = EnvConfig::default();
        let s = setup(6.0, 7);
        let d = run_expert(&cfg, s, ChannelLayout::planar()).unwrap();
        let env = ConveyorEnv::new(cfg, s);
        let c = env.expert_chunk(50, ChannelLayout::planar()).unwrap();
        for h in 0..50 {
            assert_eq!(c.row(h), d.actions[h].as_slice());
        }
    }

    #[test]
    fn slicing_counts_and_pads() {
        let layout = ChannelLayout::planar();
        let demo = Demonstration {
            setup: setup(6.0, 1),
            observations: vec![ConveyorEnv::new(EnvConfig::default(), setup(6.0, 1)).observe(); 61],
            actions: vec![vec![0.01, 0.0, -1.0]; 60],
            outcome: Outcome::Success,
            seed: 1,
        };
        let pairs = slice_demo(&demo, 0, 50, 12, layout).unwrap();
        assert_eq!(pairs.len(), 5);
        assert!(pairs.iter().all(|p| p.target.horizon() == 50));
        let last = &pairs[4];
        assert_eq!(last.mask.iter().filter(|&&m| m).count(), 12);
        assert_eq!(last.target.row(30), &[0.0, 0.0, -1.0]);
    }

    #[test]
    fn unperturbed_collection_matches_slicing() {
        let layout = ChannelLayout::planar();
        let cfg = EnvConfig::default();
        let mut rng = stream_rng(3, &[]);
        let (demo, pairs) = collect_demo(&cfg, setup(10.0, 3), layout, 50, 12, &Perturbation::none(), &mut rng).unwrap();
        assert_eq!(pairs, slice_demo(&demo, 0, 50, 12, layout).unwrap());
    }

    #[test]
    fn perturbed_demos_replay_and_stay_solvable() {
        let layout = ChannelLayout::planar();
        let cfg = EnvConfig::default();
        let mut wins = 0;
        for seed in 0..20 {
            let mut rng = stream_rng(seed, &[]);
            let (demo, pairs) = collect_demo(&cfg, setup(10.0, seed), layout, 50, 3, &Perturbation::default(), &mut rng).unwrap();
            assert!(demo.replay_matches(&cfg).unwrap());
            assert_eq!(pairs.len(), demo.len().div_ceil(3));
            wins += usize::from(demo.outcome.is_success());
        }
        assert!(wins >= 18, "{wins}");
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let cfg = DatasetConfig { episodes: 6, ..Default::default() };
        let a = generate_dataset(&EnvConfig::default(), &cfg, ChannelLayout::planar(), ExecMode::Parallel).unwrap();
        let b = generate_dataset(&EnvConfig::default(), &cfg, ChannelLayout::planar(), ExecMode::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.pairs.iter().all(|p| p.target.horizon() == 50));
    }
}
