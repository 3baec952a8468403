//! The draft model: a small network that proposes a whole candidate chunk
//! from the fresh observation in one forward pass, trained with a
//! prefix-weighted smooth-L1 loss.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::actions::{ActionChunk, ChannelLayout, Space, Standardizer};
use crate::envsim::TrainingPair;
use crate::error::{Error, Result};
use crate::flowpolicy::{denoise, DenoiseConfig, MainPolicy, Observation};
use crate::nn::{clip_global_norm, AdamWConfig, Gradients, LrSchedule, Mlp, OptimState};
use crate::par::{self, ExecMode};
use crate::rng::{stream, stream_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DraftModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for DraftModelConfig {
    fn default() -> Self {
        Self { hidden: vec![48] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftModel {
    pub net: Mlp,
    pub layout: ChannelLayout,
    pub horizon: usize,
    pub num_tasks: usize,
    pub world_norm: Standardizer,
    pub state_norm: Standardizer,
}

impl DraftModel {
    pub fn new(
        cfg: &DraftModelConfig,
        layout: ChannelLayout,
        horizon: usize,
        num_tasks: usize,
        world_norm: Standardizer,
        state_norm: Standardizer,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut sizes = vec![world_norm.dim() + num_tasks + state_norm.dim()];
        sizes.extend(&cfg.hidden);
        sizes.push(horizon * layout.dim());
        Ok(Self {
            net: Mlp::new(&sizes, rng)?,
            layout,
            horizon,
            num_tasks,
            world_norm,
            state_norm,
        })
    }

    pub fn input_row(&self, obs: &Observation) -> Result<Vec<f64>> {
        obs.validate(self.world_norm.dim(), self.state_norm.dim(), self.num_tasks)?;
        let mut row = self.world_norm.normalize_vec(&obs.world);
        row.extend((0..self.num_tasks).map(|t| if t == obs.task_id { 1.0 } else { 0.0 }));
        row.extend(self.state_norm.normalize_vec(&obs.robot_state));
        Ok(row)
    }

    /// One forward pass from the fresh observation; standardized output.
    pub fn propose(&self, obs: &Observation) -> Result<ActionChunk> {
        let out = self.net.predict(&self.input_row(obs)?)?;
        ActionChunk::new(out, self.horizon, self.layout, Space::Standardized)
    }
}

pub fn smooth_l1(x: f64, y: f64, beta: f64) -> f64 {
    let d = (x - y).abs();
    if d < beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1`] with respect to `x`.
pub fn smooth_l1_grad(x: f64, y: f64, beta: f64) -> f64 {
    let d = x - y;
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// `w_h = gamma^(h-1)` for `h <= p`, `tail` afterwards (1-based `h`).
pub fn prefix_weights(p: usize, horizon: usize, gamma: f64, tail: f64) -> Result<Vec<f64>> {
    if p == 0 || p > horizon {
        return Err(Error::invalid("prefix length", format!("{p} not in 1..={horizon}")));
    }
    Ok((0..horizon)
        .map(|h| if h < p { gamma.powi(h as i32) } else { tail })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Chunks sampled from the trained main policy.
    #[default]
    Teacher,
    /// The demonstrator's own actions.
    Demo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DraftTrainConfig {
    pub beta: f64,
    pub gamma_prefix: f64,
    pub tail_weight: f64,
    pub max_prefix: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    pub grad_clip: Option<f64>,
    pub shard_size: usize,
    /// Leading steps scored by the validation RMS used for checkpoint
    /// selection.
    pub select_steps: usize,
    pub val_fraction: f64,
    pub target_source: TargetSource,
    pub seed: u64,
}

impl Default for DraftTrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma_prefix: 0.9,
            tail_weight: 0.1,
            max_prefix: 16,
            epochs: 150,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::Cosine {
                warmup_steps: 100,
                min_lr: 1e-5,
            },
            grad_clip: Some(1.0),
            shard_size: 64,
            select_steps: 12,
            val_fraction: 0.1,
            target_source: TargetSource::Teacher,
            seed: 0,
        }
    }
}

impl DraftTrainConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if !(self.gamma_prefix > 0.0 && self.gamma_prefix <= 1.0) {
            return Err(Error::invalid("gamma_prefix", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tail_weight) {
            return Err(Error::invalid("tail_weight", "must lie in [0, 1]"));
        }
        if self.max_prefix == 0 || self.max_prefix > horizon {
            return Err(Error::invalid("max_prefix", format!("must lie in 1..={horizon}")));
        }
        if self.beta <= 0.0 {
            return Err(Error::invalid("beta", "must be positive"));
        }
        if self.batch_size == 0 || self.shard_size == 0 {
            return Err(Error::invalid("draft training", "batch and shard sizes must be positive"));
        }
        if self.select_steps == 0 || self.select_steps > horizon {
            return Err(Error::invalid("select_steps", format!("must lie in 1..={horizon}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DraftExample<'a> {
    pub obs: &'a Observation,
    /// Standardized, flattened target chunk.
    pub target: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftTrainReport {
    pub train_loss: Vec<f64>,
    pub val_rms: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_rms: f64,
}

/// Weighted loss of one chunk: `sum_h w_h * mean_c smooth_l1`.
pub fn chunk_loss(pred: &[f64], target: &[f64], weights: &[f64], dim: usize, beta: f64) -> f64 {
    pred.chunks(dim)
        .zip(target.chunks(dim))
        .zip(weights)
        .map(|((p, t), w)| w * p.iter().zip(t).map(|(a, b)| smooth_l1(*a, *b, beta)).sum::<f64>() / dim as f64)
        .sum()
}

/// RMS over all channels of the first `steps` steps.
pub fn prefix_rms(pred: &[f64], target: &[f64], dim: usize, steps: usize) -> f64 {
    let n = (steps * dim).min(pred.len());
    let se: f64 = pred[..n].iter().zip(&target[..n]).map(|(a, b)| (a - b) * (a - b)).sum();
    (se / n as f64).sqrt()
}

fn shard_gradients(
    net: &Mlp,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    weights: &[f64],
    dim: usize,
    beta: f64,
    scale: f64,
) -> Result<(Gradients, f64)> {
    let (out, tape) = net.forward_batch(inputs)?;
    let mut d_out = Array2::<f64>::zeros(out.raw_dim());
    let mut loss = 0.0;
    for i in 0..out.nrows() {
        let p = out.row(i);
        let t = targets.row(i);
        loss += chunk_loss(p.as_slice().unwrap(), t.as_slice().unwrap(), weights, dim, beta);
        for j in 0..out.ncols() {
            d_out[[i, j]] = scale * weights[j / dim] / dim as f64 * smooth_l1_grad(p[j], t[j], beta);
        }
    }
    let (g, _) = net.backward(&tape, d_out.view())?;
    Ok((g, loss))
}

/// Prefix-weighted loss of one example and its parameter gradients.
pub fn example_gradients(model: &DraftModel, obs: &Observation, target: &[f64], weights: &[f64], beta: f64) -> Result<(f64, Gradients)> {
    let x = model.input_row(obs)?;
    let x = Array2::from_shape_vec((1, x.len()), x).expect("one row");
    let y = Array2::from_shape_vec((1, target.len()), target.to_vec()).expect("one row");
    let (g, loss) = shard_gradients(&model.net, x.view(), y.view(), weights, model.layout.dim(), beta, 1.0)?;
    Ok((loss, g))
}

/// Validation RMS over the first `steps` steps, averaged over examples.
pub fn validation_rms(model: &DraftModel, val: &[DraftExample<'_>], steps: usize) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("draft validation", "empty validation set"));
    }
    let mut total = 0.0;
    for ex in val {
        let p = model.propose(ex.obs)?;
        let r = prefix_rms(p.as_slice(), ex.target, model.layout.dim(), steps);
        total += r * r;
    }
    Ok((total / val.len() as f64).sqrt())
}

/// Trains the draft, keeping the parameters of the epoch with the best
/// validation RMS over the first `select_steps` steps.
pub fn train_draft(
    model: &mut DraftModel,
    train: &[DraftExample<'_>],
    val: &[DraftExample<'_>],
    cfg: &DraftTrainConfig,
    mode: ExecMode,
) -> Result<DraftTrainReport> {
    cfg.validate(model.horizon)?;
    if train.is_empty() {
        return Err(Error::invalid("draft training", "empty dataset"));
    }
    let dim = model.layout.dim();
    let len = model.horizon * dim;
    if let Some(ex) = train.iter().chain(val).find(|ex| ex.target.len() != len) {
        return Err(Error::dim("draft training target", len, ex.target.len()));
    }
    let inputs: Vec<Vec<f64>> = train.iter().map(|ex| model.input_row(ex.obs)).collect::<Result<_>>()?;
    let in_w = inputs[0].len();
    let mut opt = OptimState::new(&model.net, cfg.optimizer);
    let total_steps = (train.len().div_ceil(cfg.batch_size) * cfg.epochs) as u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = DraftTrainReport {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_rms: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_rms: f64::INFINITY,
    };
    let mut best = model.net.clone();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, &[stream::TRAIN_DRAFT, epoch as u64, 0]));
        let mut epoch_loss = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = stream_rng(cfg.seed, &[stream::TRAIN_DRAFT, epoch as u64, 1 + bi as u64]);
            let p = rng.gen_range(1..=cfg.max_prefix);
            let weights = prefix_weights(p, model.horizon, cfg.gamma_prefix, cfg.tail_weight)?;
            let b = idx.len();
            let mut x = Array2::<f64>::zeros((b, in_w));
            let mut y = Array2::<f64>::zeros((b, len));
            for (r, &i) in idx.iter().enumerate() {
                x.row_mut(r).assign(&ndarray::aview1(&inputs[i]));
                y.row_mut(r).assign(&ndarray::aview1(train[i].target));
            }
            let shards: Vec<(usize, usize)> = (0..b)
                .step_by(cfg.shard_size)
                .map(|lo| (lo, (lo + cfg.shard_size).min(b)))
                .collect();
            let scale = 1.0 / b as f64;
            let outs = par::try_map(mode, &shards, |&(lo, hi)| {
                shard_gradients(
                    &model.net,
                    x.slice(s![lo..hi, ..]),
                    y.slice(s![lo..hi, ..]),
                    &weights,
                    dim,
                    cfg.beta,
                    scale,
                )
            })?;
            let mut it = outs.into_iter();
            let (mut g, mut loss) = it.next().expect("non-empty batch");
            for (gi, li) in it {
                g.add_assign(&gi);
                loss += li;
            }
            if !loss.is_finite() || !g.is_finite() {
                return Err(Error::non_finite(format!("draft loss at epoch {epoch}, batch {bi}")));
            }
            if let Some(max) = cfg.grad_clip {
                clip_global_norm(&mut [&mut g], max);
            }
            let lr = cfg.schedule.lr_at(cfg.optimizer.lr, step, total_steps);
            opt.step_with_lr(&mut model.net, &g, lr)?;
            step += 1;
            epoch_loss += loss;
        }
        report.train_loss.push(epoch_loss / train.len() as f64);
        let eval_set = if val.is_empty() { train } else { val };
        let rms = validation_rms(model, eval_set, cfg.select_steps)?;
        report.val_rms.push(rms);
        if rms < report.best_val_rms {
            report.best_val_rms = rms;
            report.best_epoch = epoch;
            best = model.net.clone();
        }
    }
    model.net = best;
    Ok(report)
}

/// Standardized regression targets for every pair. Teacher targets are
/// sampled from the main policy and read only the observations.
pub fn build_targets(
    source: TargetSource,
    pairs: &[TrainingPair],
    main: Option<&MainPolicy>,
    action_norm: &Standardizer,
    denoise_cfg: &DenoiseConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<Vec<f64>>> {
    match source {
        TargetSource::Demo => pairs
            .iter()
            .map(|p| action_norm.standardize(&p.target).map(ActionChunk::into_vec))
            .collect(),
        TargetSource::Teacher => {
            let main = main.ok_or_else(|| Error::invalid("teacher targets", "a trained main policy is required"))?;
            let obs: Vec<&Observation> = pairs.iter().map(|p| &p.obs).collect();
            teacher_targets(main, &obs, denoise_cfg, seed, mode)
        }
    }
}

pub fn teacher_targets(
    main: &MainPolicy,
    obs: &[&Observation],
    denoise_cfg: &DenoiseConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..obs.len()).collect();
    par::try_map(mode, &idx, |&i| {
        let cache = main.encode(obs[i], 0, 0)?;
        let mut rng = stream_rng(seed, &[stream::TEACHER, i as u64]);
        denoise(&main.field, &cache, &obs[i].robot_state, denoise_cfg, &mut rng).map(ActionChunk::into_vec)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(seed: u64, hidden: Vec<usize>) -> DraftModel {
        DraftModel::new(
            &DraftModelConfig { hidden },
            ChannelLayout::planar(),
            20,
            2,
            Standardizer::identity(5),
            Standardizer::identity(3),
            &mut stream_rng(seed, &[]),
        )
        .unwrap()
    }

    fn obs() -> Observation {
        Observation {
            world: vec![-1.0, 0.0, 0.005, 0.8, 2.4],
            task_id: 1,
            robot_state: vec![0.1, 2.2, -1.0],
        }
    }

    #[test]
    fn smooth_l1_closed_forms() {
        assert_eq!(smooth_l1(1.0, 1.0, 1.0), 0.0);
        assert!((smooth_l1(0.5, 0.0, 1.0) - 0.125).abs() < 1e-15);
        assert!((smooth_l1(0.0, 2.0, 1.0) - 1.5).abs() < 1e-15);
        for (x, y) in [(0.3, 0.0), (2.0, 0.5), (-3.0, 1.0)] {
            let h = 1e-6;
            let num = (smooth_l1(x + h, y, 1.0) - smooth_l1(x - h, y, 1.0)) / (2.0 * h);
            assert!((num - smooth_l1_grad(x, y, 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn prefix_weight_examples() {
        assert_eq!(prefix_weights(2, 4, 0.9, 0.1).unwrap(), vec![1.0, 0.9, 0.1, 0.1]);
        let ramp = prefix_weights(5, 5, 0.9, 0.1).unwrap();
        assert_eq!(ramp[0], 1.0);
        for (h, w) in ramp.iter().enumerate() {
            assert!((w - 0.9f64.powi(h as i32)).abs() < 1e-15);
        }
        assert!(prefix_weights(3, 3, 1.0, 1.0).unwrap().iter().all(|&w| w == 1.0));
        assert!(prefix_weights(0, 3, 0.9, 0.1).is_err());
        assert!(prefix_weights(4, 3, 0.9, 0.1).is_err());
    }

    #[test]
    fn zero_net_proposes_zeros_and_is_deterministic() {
        let mut m = model(1, vec![8]);
        let a = m.propose(&obs()).unwrap();
        assert_eq!(a, m.propose(&obs()).unwrap());
        assert_eq!(a.horizon(), 20);
        m.net = Mlp::zeros(m.net.sizes()).unwrap();
        assert!(m.propose(&obs()).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let mut bad = obs();
        bad.world.pop();
        assert!(m.propose(&bad).is_err());
    }

    #[test]
    fn loss_is_zero_at_target() {
        let t = vec![0.3; 60];
        let w = prefix_weights(4, 20, 0.9, 0.1).unwrap();
        assert_eq!(chunk_loss(&t, &t, &w, 3, 1.0), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model(2, vec![7]);
        let o = obs();
        let x = Array2::from_shape_vec((1, 10), m.input_row(&o).unwrap()).unwrap();
        let target: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let y = Array2::from_shape_vec((1, 60), target.clone()).unwrap();
        let w = prefix_weights(6, 20, 0.9, 0.1).unwrap();
        let (g, _) = shard_gradients(&m.net, x.view(), y.view(), &w, 3, 1.0, 1.0).unwrap();
        let eval = |net: &Mlp| chunk_loss(&net.predict(x.row(0).as_slice().unwrap()).unwrap(), &target, &w, 3, 1.0);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for l in 0..2 {
            let (r, c) = m.net.weights()[l].dim();
            for k in 0..10 {
                let (i, j) = ((k * 7) % r, (k * 3) % c);
                let mut p = m.net.clone();
                p.weights_mut()[l][[i, j]] += h;
                let mut q = m.net.clone();
                q.weights_mut()[l][[i, j]] -= h;
                let num = (eval(&p) - eval(&q)) / (2.0 * h);
                let ana = g.weights[l][[i, j]];
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn single_sample_is_memorized() {
        let mut m = model(3, vec![16]);
        let o = obs();
        let target: Vec<f64> = (0..60).map(|i| ((i / 3) as f64 * 0.2).cos()).collect();
        let ex = [DraftExample { obs: &o, target: &target }];
        let cfg = DraftTrainConfig {
            epochs: 600,
            batch_size: 1,
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            schedule: LrSchedule::Constant,
            ..Default::default()
        };
        let rep = train_draft(&mut m, &ex, &ex, &cfg, ExecMode::Sequential).unwrap();
        assert!(rep.best_val_rms < 0.05, "{}", rep.best_val_rms);
        let p = m.propose(&o).unwrap();
        assert!(prefix_rms(p.as_slice(), &target, 3, 12) < 0.05);
        assert_eq!(rep.best_val_rms, rep.val_rms[rep.best_epoch]);
    }

    #[test]
    fn selection_metric_ignores_later_steps() {
        let a = vec![0.0; 60];
        let mut b = a.clone();
        for v in &mut b[36..] {
            *v = 100.0;
        }
        assert_eq!(prefix_rms(&a, &b, 3, 12), 0.0);
        b[35] = 1.0;
        assert!(prefix_rms(&a, &b, 3, 12) > 0.0);
    }

    #[test]
    fn teacher_mode_needs_main_policy() {
        let r = build_targets(
            TargetSource::Teacher,
            &[],
            None,
            &Standardizer::identity(3),
            &DenoiseConfig::default(),
            0,
            ExecMode::Sequential,
        );
        assert!(r.is_err());
    }

    #[test]
    fn config_validation() {
        let ok = DraftTrainConfig::default();
        assert!(ok.validate(50).is_ok());
        assert!(ok.validate(10).is_err());
        assert!(DraftTrainConfig { gamma_prefix: 0.0, ..ok.clone() }.validate(50).is_err());
        assert!(DraftTrainConfig { tail_weight: 1.5, ..ok.clone() }.validate(50).is_err());
    }

    proptest! {
        #[test]
        fn weights_non_increasing(h in 1usize..60, p_frac in 0.0f64..1.0, gamma in 0.01f64..=1.0) {
            let p = 1 + ((h - 1) as f64 * p_frac) as usize;
            let tail = gamma.powi(p as i32 - 1) * 0.5;
            let w = prefix_weights(p, h, gamma, tail).unwrap();
            prop_assert!(w.windows(2).all(|x| x[1] <= x[0]));
        }
    }
}
