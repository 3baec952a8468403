//! Data generation and model training driven by a [`Config`].

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::draft::{build_targets, train_draft, DraftExample, DraftModel, DraftTrainReport};
use crate::envsim::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::flowpolicy::{fit_feature_norms, train_flow, FlowExample, MainPolicy};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::runtime::Models;

use super::checkpoint::Checkpoint;
use super::config::Config;

/// Seeds actually used by each training stage, derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub root: u64,
    pub dataset: u64,
    pub main_init: u64,
    pub main_train: u64,
    pub teacher: u64,
    pub draft_init: u64,
    pub draft_train: u64,
}

impl SeedLineage {
    pub fn new(cfg: &Config) -> Self {
        let r = cfg.seed;
        Self {
            root: r,
            dataset: derive_seed(r, &[stream::DATASET, cfg.dataset.seed]),
            main_init: derive_seed(r, &[stream::INIT, 0]),
            main_train: derive_seed(r, &[stream::TRAIN_MAIN, cfg.main_train.seed]),
            teacher: derive_seed(r, &[stream::TEACHER]),
            draft_init: derive_seed(r, &[stream::INIT, 1]),
            draft_train: derive_seed(r, &[stream::TRAIN_DRAFT, cfg.draft_train.seed]),
        }
    }

    pub fn named(&self) -> Vec<(String, u64)> {
        [
            ("root", self.root),
            ("dataset", self.dataset),
            ("main_init", self.main_init),
            ("main_train", self.main_train),
            ("teacher", self.teacher),
            ("draft_init", self.draft_init),
            ("draft_train", self.draft_train),
        ]
        .into_iter()
        .map(|(n, s)| (n.to_string(), s))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub pairs: usize,
    pub excluded_episodes: usize,
    pub main_params: usize,
    pub draft_params: usize,
    pub main_loss: Vec<f64>,
    pub draft: Option<DraftTrainReport>,
    pub seconds: f64,
}

fn log(verbose: bool, msg: impl FnOnce() -> String) {
    if verbose {
        eprintln!("{}", msg());
    }
}

pub fn generate(cfg: &Config) -> Result<Dataset> {
    let mut dcfg = cfg.dataset.clone();
    dcfg.seed = SeedLineage::new(cfg).dataset;
    generate_dataset(&cfg.env, &dcfg, cfg.layout, cfg.exec)
}

fn num_tasks(ds: &Dataset) -> usize {
    ds.pairs.iter().map(|p| p.obs.task_id + 1).max().unwrap_or(1).max(2)
}

pub fn train_main(cfg: &Config, ds: &Dataset) -> Result<(MainPolicy, Vec<f64>)> {
    let seeds = SeedLineage::new(cfg);
    let (wn, sn) = fit_feature_norms(ds.pairs.iter().map(|p| &p.obs))?;
    let targets: Vec<Vec<f64>> = ds
        .pairs
        .iter()
        .map(|p| ds.action_norm.standardize(&p.target).map(|c| c.into_vec()))
        .collect::<Result<_>>()?;
    let examples: Vec<FlowExample> = ds
        .pairs
        .iter()
        .zip(&targets)
        .map(|(p, t)| FlowExample { obs: &p.obs, target: t })
        .collect();
    let mut main = MainPolicy::new(
        &cfg.main_model,
        ds.layout,
        ds.horizon,
        num_tasks(ds),
        wn,
        sn,
        &mut stream_rng(seeds.main_init, &[]),
    )?;
    let mut tcfg = cfg.main_train.clone();
    tcfg.seed = seeds.main_train;
    let curve = train_flow(&mut main, &examples, &tcfg, cfg.exec)?;
    Ok((main, curve))
}

/// Checks the draft is small and cheap next to the main policy.
pub fn check_asymmetry(main: &MainPolicy, draft: &DraftModel, denoise_steps: usize) -> Result<()> {
    let (mp, dp) = (main.param_count(), draft.net.param_count());
    if dp * 2 >= mp {
        return Err(Error::invalid("draft size", format!("{dp} parameters is not below half of the main model's {mp}")));
    }
    let (mf, df) = (main.denoise_flops(denoise_steps), draft.net.flops());
    if df * 5 >= mf {
        return Err(Error::invalid("draft cost", format!("{df} FLOPs is not below a fifth of a full denoise ({mf})")));
    }
    Ok(())
}

pub fn train_draft_model(cfg: &Config, ds: &Dataset, main: &MainPolicy) -> Result<(DraftModel, DraftTrainReport)> {
    let seeds = SeedLineage::new(cfg);
    let targets = build_targets(
        cfg.draft_train.target_source,
        &ds.pairs,
        Some(main),
        &ds.action_norm,
        &cfg.runtime.denoise,
        seeds.teacher,
        cfg.exec,
    )?;
    let mut draft = DraftModel::new(
        &cfg.draft_model,
        ds.layout,
        ds.horizon,
        main.encoder.num_tasks,
        main.encoder.world_norm.clone(),
        main.field.state_norm.clone(),
        &mut stream_rng(seeds.draft_init, &[]),
    )?;
    check_asymmetry(main, &draft, cfg.runtime.denoise.num_steps)?;
    let val_episodes = (cfg.draft_train.val_fraction * ds.demos.len() as f64).ceil() as usize;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (p, t) in ds.pairs.iter().zip(&targets) {
        let ex = DraftExample { obs: &p.obs, target: t };
        if p.episode < val_episodes {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    let mut tcfg = cfg.draft_train.clone();
    tcfg.seed = seeds.draft_train;
    let report = train_draft(&mut draft, &train, &val, &tcfg, cfg.exec)?;
    Ok((draft, report))
}

/// Generates data, trains both networks and packs them into a checkpoint.
pub fn train_all(cfg: &Config, verbose: bool) -> Result<(Checkpoint, TrainSummary)> {
    let t0 = Instant::now();
    let ds = generate(cfg)?;
    log(verbose, || format!("dataset: {} pairs from {} episodes ({} excluded)", ds.pairs.len(), ds.demos.len(), ds.excluded.len()));
    let (main, main_loss) = train_main(cfg, &ds)?;
    log(verbose, || {
        format!(
            "main policy: {} parameters, final loss {:.4} ({:.0} s)",
            main.param_count(),
            main_loss.last().copied().unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        )
    });
    let (draft, report) = train_draft_model(cfg, &ds, &main)?;
    log(verbose, || {
        format!(
            "draft: {} parameters ({:.3} of main), best validation RMS {:.4} at epoch {} ({:.0} s)",
            draft.net.param_count(),
            draft.net.param_count() as f64 / main.param_count() as f64,
            report.best_val_rms,
            report.best_epoch,
            t0.elapsed().as_secs_f64()
        )
    });
    let summary = TrainSummary {
        pairs: ds.pairs.len(),
        excluded_episodes: ds.excluded.len(),
        main_params: main.param_count(),
        draft_params: draft.net.param_count(),
        main_loss,
        draft: Some(report),
        seconds: t0.elapsed().as_secs_f64(),
    };
    let ckpt = Checkpoint {
        models: Models {
            main,
            draft: Some(draft),
            action_norm: ds.action_norm.clone(),
        },
        config: serde_json::to_value(cfg)?,
        seeds: SeedLineage::new(cfg).named(),
    };
    Ok((ckpt, summary))
}

/// Loads the configured checkpoint, or trains and saves one when absent.
pub fn load_or_train(cfg: &Config, path: &Path, verbose: bool) -> Result<Checkpoint> {
    if path.exists() {
        return Checkpoint::load(path);
    }
    log(verbose, || format!("no checkpoint at {}; training from scratch", path.display()));
    let (ckpt, _) = train_all(cfg, verbose)?;
    ckpt.save(path)?;
    Ok(ckpt)
}
