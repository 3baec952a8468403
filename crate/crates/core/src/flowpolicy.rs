//! The main policy: a conditioning encoder plus a flow-matching velocity
//! field, integrated with forward Euler to turn Gaussian noise into an
//! action chunk.
//!
//! The encoder output ([`ConditioningCache`]) plays the role of the cached
//! context of a full inference round. It depends only on the world features
//! and the task, never on the robot state, which is supplied fresh to every
//! velocity evaluation.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionChunk, ChannelLayout, Space, Standardizer};
use crate::error::{Error, Result};
use crate::nn::{clip_global_norm, AdamWConfig, Gradients, LrSchedule, Mlp, OptimState};
use crate::par::{self, ExecMode};
use crate::rng::{normal_vec, stream, stream_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Scene features as seen by the camera.
    pub world: Vec<f64>,
    pub task_id: usize,
    /// Gripper position and open/closed state.
    pub robot_state: Vec<f64>,
}

impl Observation {
    pub fn validate(&self, world_dim: usize, state_dim: usize, num_tasks: usize) -> Result<()> {
        if self.world.len() != world_dim {
            return Err(Error::dim("observation world features", world_dim, self.world.len()));
        }
        if self.robot_state.len() != state_dim {
            return Err(Error::dim("observation robot state", state_dim, self.robot_state.len()));
        }
        if self.task_id >= num_tasks {
            return Err(Error::invalid(
                "observation task id",
                format!("{} not in 0..{num_tasks}", self.task_id),
            ));
        }
        if self.world.iter().chain(&self.robot_state).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("observation"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningCache {
    pub embedding: Vec<f64>,
    pub captured_round: usize,
    pub captured_tick: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub net: Mlp,
    pub num_tasks: usize,
    pub world_norm: Standardizer,
}

impl Encoder {
    pub fn world_dim(&self) -> usize {
        self.world_norm.dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn input_row(&self, obs: &Observation) -> Result<Vec<f64>> {
        if obs.world.len() != self.world_dim() {
            return Err(Error::dim("observation world features", self.world_dim(), obs.world.len()));
        }
        if obs.task_id >= self.num_tasks {
            return Err(Error::invalid(
                "observation task id",
                format!("{} not in 0..{}", obs.task_id, self.num_tasks),
            ));
        }
        let mut row = self.world_norm.normalize_vec(&obs.world);
        row.extend((0..self.num_tasks).map(|t| if t == obs.task_id { 1.0 } else { 0.0 }));
        Ok(row)
    }

    pub fn encode(&self, obs: &Observation, round: usize, tick: u64) -> Result<ConditioningCache> {
        let embedding = self.net.predict(&self.input_row(obs)?)?;
        Ok(ConditioningCache {
            embedding,
            captured_round: round,
            captured_tick: tick,
        })
    }
}

/// Anything that can be queried for a denoising velocity.
pub trait VelocityModel: Sync {
    fn horizon(&self) -> usize;
    fn layout(&self) -> ChannelLayout;
    fn velocity(&self, noisy: &ActionChunk, tau: f64, cache: &ConditioningCache, state: &[f64]) -> Result<ActionChunk>;
}

fn check_query(model: &dyn VelocityModel, noisy: &ActionChunk, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid("denoising time", format!("tau = {tau} outside [0, 1]")));
    }
    noisy.expect_space(Space::Standardized)?;
    if noisy.horizon() != model.horizon() {
        return Err(Error::dim("noisy chunk horizon", model.horizon(), noisy.horizon()));
    }
    if noisy.layout() != model.layout() {
        return Err(Error::invalid("noisy chunk", "channel layout does not match the model"));
    }
    Ok(())
}

/// Learned velocity field over `[noisy chunk, tau, embedding, robot state]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub net: Mlp,
    pub horizon: usize,
    pub layout: ChannelLayout,
    pub state_norm: Standardizer,
    /// When positive, the network predicts the clean endpoint `D` and the
    /// velocity is `(D - x) / max(1 - tau, time_floor)`; zero means the
    /// network output is the velocity itself.
    pub time_floor: f64,
}

impl VelocityField {
    pub fn output_gain(&self, tau: f64) -> f64 {
        if self.time_floor > 0.0 {
            1.0 / (1.0 - tau).max(self.time_floor)
        } else {
            1.0
        }
    }

    /// Maps raw network outputs at noisy state `x` to velocities.
    pub fn to_velocity(&self, out: &[f64], x: &[f64], tau: f64) -> Vec<f64> {
        if self.time_floor > 0.0 {
            let g = self.output_gain(tau);
            out.iter().zip(x).map(|(d, x)| g * (d - x)).collect()
        } else {
            out.to_vec()
        }
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.layout.dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.net.input_dim() - self.chunk_len() - 1 - self.state_norm.dim()
    }

    fn input_row(&self, noisy: &[f64], tau: f64, embedding: &[f64], state: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.embed_dim() {
            return Err(Error::dim("conditioning embedding", self.embed_dim(), embedding.len()));
        }
        if state.len() != self.state_norm.dim() {
            return Err(Error::dim("robot state", self.state_norm.dim(), state.len()));
        }
        let mut row = Vec::with_capacity(self.net.input_dim());
        row.extend_from_slice(noisy);
        row.push(tau);
        row.extend_from_slice(embedding);
        row.extend(self.state_norm.normalize_vec(state));
        Ok(row)
    }
}

impl VelocityModel for VelocityField {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn layout(&self) -> ChannelLayout {
        self.layout
    }

    fn velocity(&self, noisy: &ActionChunk, tau: f64, cache: &ConditioningCache, state: &[f64]) -> Result<ActionChunk> {
        check_query(self, noisy, tau)?;
        let row = self.input_row(noisy.as_slice(), tau, &cache.embedding, state)?;
        let out = self.net.predict(&row)?;
        noisy.with_values(self.to_velocity(&out, noisy.as_slice(), tau))
    }
}

/// Wraps a field and counts velocity evaluations.
#[derive(Debug)]
pub struct Counted<'a, M: ?Sized> {
    inner: &'a M,
    count: AtomicUsize,
}

impl<'a, M: VelocityModel + ?Sized> Counted<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::Relaxed)
    }
}

impl<M: VelocityModel + ?Sized> VelocityModel for Counted<'_, M> {
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn layout(&self) -> ChannelLayout {
        self.inner.layout()
    }

    fn velocity(&self, noisy: &ActionChunk, tau: f64, cache: &ConditioningCache, state: &[f64]) -> Result<ActionChunk> {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(noisy, tau, cache, state)
    }
}

/// Closed-form fields used as oracles in tests and self-checks.
pub mod fields {
    use super::*;

    /// `v(x, tau) = (target - x) / (1 - tau)`: the straight-line flow that
    /// lands exactly on `target` from any state.
    #[derive(Debug, Clone)]
    pub struct StraightLine {
        pub target: ActionChunk,
    }

    impl VelocityModel for StraightLine {
        fn horizon(&self) -> usize {
            self.target.horizon()
        }

        fn layout(&self) -> ChannelLayout {
            self.target.layout()
        }

        fn velocity(&self, noisy: &ActionChunk, tau: f64, _: &ConditioningCache, _: &[f64]) -> Result<ActionChunk> {
            check_query(self, noisy, tau)?;
            let rem = 1.0 - tau;
            let v = noisy
                .as_slice()
                .iter()
                .zip(self.target.as_slice())
                .map(|(x, t)| if rem > 0.0 { (t - x) / rem } else { 0.0 })
                .collect();
            noisy.with_values(v)
        }
    }

    /// A field that ignores its inputs.
    #[derive(Debug, Clone)]
    pub struct Constant {
        pub value: ActionChunk,
    }

    impl VelocityModel for Constant {
        fn horizon(&self) -> usize {
            self.value.horizon()
        }

        fn layout(&self) -> ChannelLayout {
            self.value.layout()
        }

        fn velocity(&self, noisy: &ActionChunk, tau: f64, _: &ConditioningCache, _: &[f64]) -> Result<ActionChunk> {
            check_query(self, noisy, tau)?;
            Ok(self.value.clone())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    pub num_steps: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self { num_steps: 10 }
    }
}

/// Draws `A^0 ~ N(0, I)` and integrates the field to `tau = 1`.
pub fn denoise(
    field: &dyn VelocityModel,
    cache: &ConditioningCache,
    state: &[f64],
    cfg: &DenoiseConfig,
    rng: &mut Rng,
) -> Result<ActionChunk> {
    let layout = field.layout();
    let n = field.horizon() * layout.dim();
    let a0 = ActionChunk::new(normal_vec(rng, n), field.horizon(), layout, Space::Standardized)?;
    denoise_from(field, a0, cache, state, cfg)
}

/// Forward Euler on the lattice `tau_i = i / N`, `i = 0..N-1`; the field is
/// never queried at `tau = 1`.
pub fn denoise_from(
    field: &dyn VelocityModel,
    start: ActionChunk,
    cache: &ConditioningCache,
    state: &[f64],
    cfg: &DenoiseConfig,
) -> Result<ActionChunk> {
    if cfg.num_steps == 0 {
        return Err(Error::invalid("denoise steps", "need at least one step"));
    }
    let dt = 1.0 / cfg.num_steps as f64;
    let mut x = start;
    for i in 0..cfg.num_steps {
        let tau = i as f64 * dt;
        let v = field.velocity(&x, tau, cache, state)?;
        let next: Vec<f64> = x
            .as_slice()
            .iter()
            .zip(v.as_slice())
            .map(|(a, b)| a + dt * b)
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("denoise state after step {i} (tau = {tau})")));
        }
        x = x.with_values(next)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MainModelConfig {
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub field_hidden: Vec<usize>,
    pub time_floor: f64,
}

impl Default for MainModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            encoder_hidden: vec![64],
            field_hidden: vec![256, 256],
            time_floor: 0.1,
        }
    }
}

/// Encoder plus velocity field: everything a full-path round runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MainPolicy {
    pub encoder: Encoder,
    pub field: VelocityField,
}

impl MainPolicy {
    pub fn new(
        cfg: &MainModelConfig,
        layout: ChannelLayout,
        horizon: usize,
        num_tasks: usize,
        world_norm: Standardizer,
        state_norm: Standardizer,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut enc_sizes = vec![world_norm.dim() + num_tasks];
        enc_sizes.extend(&cfg.encoder_hidden);
        enc_sizes.push(cfg.embed_dim);
        let chunk = horizon * layout.dim();
        let mut field_sizes = vec![chunk + 1 + cfg.embed_dim + state_norm.dim()];
        field_sizes.extend(&cfg.field_hidden);
        field_sizes.push(chunk);
        Ok(Self {
            encoder: Encoder {
                net: Mlp::new(&enc_sizes, rng)?,
                num_tasks,
                world_norm,
            },
            field: VelocityField {
                net: Mlp::new(&field_sizes, rng)?,
                horizon,
                layout,
                state_norm,
                time_floor: cfg.time_floor,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoder.net.param_count() + self.field.net.param_count()
    }

    /// FLOPs of one full denoise (encoder once, field `steps` times).
    pub fn denoise_flops(&self, steps: usize) -> usize {
        self.encoder.net.flops() + steps * self.field.net.flops()
    }

    pub fn encode(&self, obs: &Observation, round: usize, tick: u64) -> Result<ConditioningCache> {
        self.encoder.encode(obs, round, tick)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub grad_clip: Option<f64>,
    /// Rows per gradient shard; shards are reduced in index order so the
    /// result does not depend on the thread count.
    pub shard_size: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 1e-4,
                ..Default::default()
            },
            schedule: LrSchedule::Cosine {
                warmup_steps: 200,
                min_lr: 1e-5,
            },
            grad_clip: Some(1.0),
            shard_size: 64,
            seed: 0,
        }
    }
}

/// Flow-matching regression sample built from a target `A*`, noise `eps`,
/// and time `tau`: input `tau A* + (1 - tau) eps`, target velocity
/// `A* - eps`.
pub fn flow_target(target: &[f64], eps: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let noisy = target.iter().zip(eps).map(|(a, e)| tau * a + (1.0 - tau) * e).collect();
    let vel = target.iter().zip(eps).map(|(a, e)| a - e).collect();
    (noisy, vel)
}

/// One standardized training example for the main policy.
#[derive(Debug, Clone)]
pub struct FlowExample<'a> {
    pub obs: &'a Observation,
    pub target: &'a [f64],
}

struct ShardOut {
    enc: Gradients,
    field: Gradients,
    loss_sum: f64,
}

fn shard_gradients(
    policy: &MainPolicy,
    enc_rows: ArrayView2<'_, f64>,
    noisy: ArrayView2<'_, f64>,
    taus: &[f64],
    states: ArrayView2<'_, f64>,
    vel_target: ArrayView2<'_, f64>,
    scale: f64,
) -> Result<ShardOut> {
    let b = enc_rows.nrows();
    let (emb, enc_tape) = policy.encoder.net.forward_batch(enc_rows)?;
    let chunk = policy.field.chunk_len();
    let e = emb.ncols();
    let sd = states.ncols();
    let mut input = Array2::<f64>::zeros((b, chunk + 1 + e + sd));
    input.slice_mut(s![.., ..chunk]).assign(&noisy);
    for (i, &t) in taus.iter().enumerate() {
        input[[i, chunk]] = t;
    }
    input.slice_mut(s![.., chunk + 1..chunk + 1 + e]).assign(&emb);
    input.slice_mut(s![.., chunk + 1 + e..]).assign(&states);
    let (f, tape) = policy.field.net.forward_batch(input.view())?;
    let mut d_out = Array2::<f64>::zeros(f.raw_dim());
    let mut loss_sum = 0.0;
    for (i, &t) in taus.iter().enumerate() {
        let g = policy.field.output_gain(t);
        let skip = if policy.field.time_floor > 0.0 { 1.0 } else { 0.0 };
        for j in 0..chunk {
            let d = g * (f[[i, j]] - skip * noisy[[i, j]]) - vel_target[[i, j]];
            loss_sum += d * d;
            d_out[[i, j]] = 2.0 * d * g * scale;
        }
    }
    loss_sum /= chunk as f64;
    let (field, d_in) = policy.field.net.backward(&tape, d_out.view())?;
    let d_emb = d_in.slice(s![.., chunk + 1..chunk + 1 + e]).to_owned();
    let (enc, _) = policy.encoder.net.backward(&enc_tape, d_emb.view())?;
    Ok(ShardOut { enc, field, loss_sum })
}

/// Flow-matching loss of one example at a fixed noise draw and time, with
/// the gradients of encoder and field parameters.
pub fn example_gradients(policy: &MainPolicy, obs: &Observation, target: &[f64], eps: &[f64], tau: f64) -> Result<(f64, Gradients, Gradients)> {
    let chunk = policy.field.chunk_len();
    if target.len() != chunk || eps.len() != chunk {
        return Err(Error::dim("flow example", chunk, target.len().max(eps.len())));
    }
    let (noisy, vel) = flow_target(target, eps, tau);
    let row = |v: Vec<f64>| Array2::from_shape_vec((1, v.len()), v).expect("one row");
    let enc = row(policy.encoder.input_row(obs)?);
    let st = row(policy.field.state_norm.normalize_vec(&obs.robot_state));
    let out = shard_gradients(
        policy,
        enc.view(),
        row(noisy).view(),
        &[tau],
        st.view(),
        row(vel).view(),
        1.0 / chunk as f64,
    )?;
    Ok((out.loss_sum, out.enc, out.field))
}

/// Jointly trains encoder and velocity field with the flow-matching loss
/// `E || v(tau A* + (1-tau) eps, tau | c, s) - (A* - eps) ||^2` (mean over
/// chunk elements). Returns the per-epoch mean loss.
pub fn train_flow(policy: &mut MainPolicy, examples: &[FlowExample<'_>], cfg: &FlowTrainConfig, mode: ExecMode) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid("flow training", "empty dataset"));
    }
    if cfg.batch_size == 0 || cfg.shard_size == 0 {
        return Err(Error::invalid("flow training", "batch and shard sizes must be positive"));
    }
    let chunk = policy.field.chunk_len();
    if let Some(ex) = examples.iter().find(|ex| ex.target.len() != chunk) {
        return Err(Error::dim("flow training target", chunk, ex.target.len()));
    }
    let enc_rows: Vec<Vec<f64>> = examples
        .iter()
        .map(|ex| policy.encoder.input_row(ex.obs))
        .collect::<Result<_>>()?;
    let state_rows: Vec<Vec<f64>> = examples
        .iter()
        .map(|ex| policy.field.state_norm.normalize_vec(&ex.obs.robot_state))
        .collect();
    let enc_w = enc_rows[0].len();
    let sd = state_rows[0].len();

    let mut enc_opt = OptimState::new(&policy.encoder.net, cfg.optimizer);
    let mut field_opt = OptimState::new(&policy.field.net, cfg.optimizer);
    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = (batches_per_epoch * cfg.epochs) as u64;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, &[stream::TRAIN_MAIN, epoch as u64, 0]));
        let mut epoch_loss = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = stream_rng(cfg.seed, &[stream::TRAIN_MAIN, epoch as u64, 1 + bi as u64]);
            let b = idx.len();
            let mut enc_b = Array2::<f64>::zeros((b, enc_w));
            let mut st_b = Array2::<f64>::zeros((b, sd));
            let mut noisy_b = Array2::<f64>::zeros((b, chunk));
            let mut vel_b = Array2::<f64>::zeros((b, chunk));
            let mut taus = Vec::with_capacity(b);
            for (r, &i) in idx.iter().enumerate() {
                let tau: f64 = rng.gen_range(0.0..1.0);
                let eps = normal_vec(&mut rng, chunk);
                let (noisy, vel) = flow_target(examples[i].target, &eps, tau);
                enc_b.row_mut(r).assign(&ndarray::aview1(&enc_rows[i]));
                st_b.row_mut(r).assign(&ndarray::aview1(&state_rows[i]));
                noisy_b.row_mut(r).assign(&ndarray::aview1(&noisy));
                vel_b.row_mut(r).assign(&ndarray::aview1(&vel));
                taus.push(tau);
            }
            let scale = 1.0 / (b * chunk) as f64;
            let shards: Vec<(usize, usize)> = (0..b)
                .step_by(cfg.shard_size)
                .map(|lo| (lo, (lo + cfg.shard_size).min(b)))
                .collect();
            let outs = par::try_map(mode, &shards, |&(lo, hi)| {
                shard_gradients(
                    policy,
                    enc_b.slice(s![lo..hi, ..]),
                    noisy_b.slice(s![lo..hi, ..]),
                    &taus[lo..hi],
                    st_b.slice(s![lo..hi, ..]),
                    vel_b.slice(s![lo..hi, ..]),
                    scale,
                )
            })?;
            let mut it = outs.into_iter();
            let first = it.next().expect("non-empty batch");
            let (mut g_enc, mut g_field, mut loss) = (first.enc, first.field, first.loss_sum);
            for o in it {
                g_enc.add_assign(&o.enc);
                g_field.add_assign(&o.field);
                loss += o.loss_sum;
            }
            if !loss.is_finite() || !g_field.is_finite() || !g_enc.is_finite() {
                return Err(Error::non_finite(format!("flow loss at epoch {epoch}, batch {bi}")));
            }
            if let Some(max) = cfg.grad_clip {
                clip_global_norm(&mut [&mut g_enc, &mut g_field], max);
            }
            let lr = cfg.schedule.lr_at(cfg.optimizer.lr, step, total_steps);
            enc_opt.step_with_lr(&mut policy.encoder.net, &g_enc, lr)?;
            field_opt.step_with_lr(&mut policy.field.net, &g_field, lr)?;
            step += 1;
            epoch_loss += loss;
        }
        curve.push(epoch_loss / examples.len() as f64);
    }
    Ok(curve)
}

/// Fits normalizers for world features and robot state over observations.
pub fn fit_feature_norms<'a>(obs: impl Iterator<Item = &'a Observation> + Clone) -> Result<(Standardizer, Standardizer)> {
    let first = obs.clone().next().ok_or_else(|| Error::invalid("feature norms", "no observations"))?;
    let world = Standardizer::fit(first.world.len(), obs.clone().map(|o| o.world.as_slice()))?;
    let state = Standardizer::fit(first.robot_state.len(), obs.map(|o| o.robot_state.as_slice()))?;
    Ok((world, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn cache(e: usize) -> ConditioningCache {
        ConditioningCache {
            embedding: vec![0.1; e],
            captured_round: 0,
            captured_tick: 0,
        }
    }

    fn tiny_policy(seed: u64) -> MainPolicy {
        let cfg = MainModelConfig {
            embed_dim: 4,
            encoder_hidden: vec![6],
            field_hidden: vec![12],
            time_floor: 0.0,
        };
        MainPolicy::new(
            &cfg,
            ChannelLayout::planar(),
            3,
            2,
            Standardizer::identity(5),
            Standardizer::identity(3),
            &mut stream_rng(seed, &[]),
        )
        .unwrap()
    }

    fn obs(x: f64) -> Observation {
        Observation {
            world: vec![x, 0.0, 0.01, 1.0, 2.0],
            task_id: 0,
            robot_state: vec![0.2, 0.3, -1.0],
        }
    }

    #[test]
    fn encoding_is_deterministic_and_state_free() {
        let p = tiny_policy(1);
        let a = p.encode(&obs(0.5), 0, 0).unwrap();
        let b = p.encode(&obs(0.5), 0, 0).unwrap();
        assert_eq!(a, b);
        let mut o = obs(0.5);
        o.robot_state = vec![9.0, -9.0, 1.0];
        assert_eq!(p.encode(&o, 0, 0).unwrap().embedding, a.embedding);
        let mut bad = obs(0.5);
        bad.task_id = 7;
        assert!(p.encode(&bad, 0, 0).is_err());
    }

    #[test]
    fn zero_field_gives_zero_velocity() {
        let mut p = tiny_policy(2);
        p.field.net = Mlp::zeros(p.field.net.sizes()).unwrap();
        let x = ActionChunk::zeros(3, ChannelLayout::planar(), Space::Standardized);
        let v = p.field.velocity(&x, 0.4, &cache(4), &[0.0, 0.0, -1.0]).unwrap();
        assert!(v.as_slice().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn velocity_rejects_bad_queries() {
        let p = tiny_policy(3);
        let x = ActionChunk::zeros(3, ChannelLayout::planar(), Space::Standardized);
        let st = [0.0, 0.0, -1.0];
        assert!(p.field.velocity(&x, 1.5, &cache(4), &st).is_err());
        assert!(p.field.velocity(&x, 0.5, &cache(5), &st).is_err());
        let x4 = ActionChunk::zeros(4, ChannelLayout::planar(), Space::Standardized);
        assert!(p.field.velocity(&x4, 0.5, &cache(4), &st).is_err());
        let raw = ActionChunk::zeros(3, ChannelLayout::planar(), Space::Raw);
        assert!(p.field.velocity(&raw, 0.5, &cache(4), &st).is_err());
    }

    #[test]
    fn constant_field_euler_is_exact() {
        let layout = ChannelLayout::planar();
        let c = ActionChunk::new(vec![0.5, -1.0, 2.0, 0.25, 0.0, -3.0], 2, layout, Space::Standardized).unwrap();
        let field = fields::Constant { value: c.clone() };
        for n in [1, 3, 10] {
            let a0 = ActionChunk::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, layout, Space::Standardized).unwrap();
            let out = denoise_from(&field, a0.clone(), &cache(1), &[], &DenoiseConfig { num_steps: n }).unwrap();
            for ((o, a), v) in out.as_slice().iter().zip(a0.as_slice()).zip(c.as_slice()) {
                assert!((o - (a + v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn straight_line_field_hits_target() {
        let layout = ChannelLayout::planar();
        let mut rng = stream_rng(5, &[]);
        let target = ActionChunk::new(normal_vec(&mut rng, 30), 10, layout, Space::Standardized).unwrap();
        let field = fields::StraightLine { target: target.clone() };
        for n in [1, 2, 10, 25] {
            let out = denoise(&field, &cache(1), &[], &DenoiseConfig { num_steps: n }, &mut rng).unwrap();
            for (o, t) in out.as_slice().iter().zip(target.as_slice()) {
                assert!((o - t).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn denoise_is_seed_deterministic() {
        let p = tiny_policy(6);
        let c = p.encode(&obs(0.1), 0, 0).unwrap();
        let st = [0.0, 0.0, -1.0];
        let a = denoise(&p.field, &c, &st, &DenoiseConfig::default(), &mut stream_rng(9, &[1])).unwrap();
        let b = denoise(&p.field, &c, &st, &DenoiseConfig::default(), &mut stream_rng(9, &[1])).unwrap();
        assert_eq!(a, b);
        assert!(denoise(&p.field, &c, &st, &DenoiseConfig { num_steps: 0 }, &mut stream_rng(9, &[1])).is_err());
    }

    #[test]
    fn flow_target_construction() {
        let (noisy, vel) = flow_target(&[2.0], &[0.0], 0.5);
        assert_eq!(noisy, vec![1.0]);
        assert_eq!(vel, vec![2.0]);
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        // loss through encoder -> field, checked on a few encoder and field
        // parameters with central differences.
        let policy = tiny_policy(7);
        let o = obs(0.3);
        let enc_row = policy.encoder.input_row(&o).unwrap();
        let st = policy.field.state_norm.normalize_vec(&o.robot_state);
        let mut rng = stream_rng(8, &[]);
        let target = normal_vec(&mut rng, 9);
        let eps = normal_vec(&mut rng, 9);
        let (noisy, vel) = flow_target(&target, &eps, 0.37);
        let eval = |p: &MainPolicy| -> f64 {
            let e = p.encoder.net.predict(&enc_row).unwrap();
            let mut row = noisy.clone();
            row.push(0.37);
            row.extend(&e);
            row.extend(&st);
            let v = p.field.to_velocity(&p.field.net.predict(&row).unwrap(), &noisy, 0.37);
            v.iter().zip(&vel).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 9.0
        };
        let view = |v: &Vec<f64>| Array2::from_shape_vec((1, v.len()), v.clone()).unwrap();
        let out = shard_gradients(
            &policy,
            view(&enc_row).view(),
            view(&noisy).view(),
            &[0.37],
            view(&st).view(),
            view(&vel).view(),
            1.0 / 9.0,
        )
        .unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for l in 0..2 {
            for idx in 0..6 {
                let (r, c) = (idx % policy.encoder.net.weights()[l].nrows(), idx % policy.encoder.net.weights()[l].ncols());
                let mut p = policy.clone();
                p.encoder.net.weights_mut()[l][[r, c]] += h;
                let mut m = policy.clone();
                m.encoder.net.weights_mut()[l][[r, c]] -= h;
                let num = (eval(&p) - eval(&m)) / (2.0 * h);
                let ana = out.enc.weights[l][[r, c]];
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));

                let (r, c) = (idx % policy.field.net.weights()[l].nrows(), idx % policy.field.net.weights()[l].ncols());
                let mut p = policy.clone();
                p.field.net.weights_mut()[l][[r, c]] += h;
                let mut m = policy.clone();
                m.field.net.weights_mut()[l][[r, c]] -= h;
                let num = (eval(&p) - eval(&m)) / (2.0 * h);
                let ana = out.field.weights[l][[r, c]];
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn single_chunk_dataset_is_reproduced() {
        let cfg = MainModelConfig {
            embed_dim: 4,
            encoder_hidden: vec![6],
            field_hidden: vec![64, 64],
            time_floor: 0.0,
        };
        let mut policy = MainPolicy::new(
            &cfg,
            ChannelLayout::planar(),
            3,
            2,
            Standardizer::identity(5),
            Standardizer::identity(3),
            &mut stream_rng(10, &[]),
        )
        .unwrap();
        let target: Vec<f64> = vec![0.8, -0.5, 1.0, 0.6, -0.4, 1.0, 0.3, -0.2, -1.0];
        let o = obs(0.0);
        let ex: Vec<FlowExample> = (0..256).map(|_| FlowExample { obs: &o, target: &target }).collect();
        let cfg = FlowTrainConfig {
            epochs: 800,
            batch_size: 32,
            optimizer: AdamWConfig { lr: 3e-3, weight_decay: 0.0, ..Default::default() },
            schedule: LrSchedule::Cosine { warmup_steps: 50, min_lr: 1e-5 },
            shard_size: 8,
            seed: 3,
            ..Default::default()
        };
        let curve = train_flow(&mut policy, &ex, &cfg, ExecMode::Sequential).unwrap();
        assert!(curve.last().unwrap() < &(0.5 * curve[0]));
        let c = policy.encode(&o, 0, 0).unwrap();
        let out = denoise(&policy.field, &c, &o.robot_state, &DenoiseConfig::default(), &mut stream_rng(4, &[])).unwrap();
        let err = out
            .as_slice()
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "max error {err}");
    }

    #[test]
    fn training_is_independent_of_exec_mode() {
        let target: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        let o = obs(0.0);
        let ex: Vec<FlowExample> = (0..20).map(|_| FlowExample { obs: &o, target: &target }).collect();
        let cfg = FlowTrainConfig { epochs: 3, batch_size: 10, shard_size: 3, ..Default::default() };
        let mut a = tiny_policy(11);
        let mut b = a.clone();
        let ca = train_flow(&mut a, &ex, &cfg, ExecMode::Sequential).unwrap();
        let cb = train_flow(&mut b, &ex, &cfg, ExecMode::Parallel).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
    }
}
