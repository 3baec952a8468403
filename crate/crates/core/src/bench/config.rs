//! The single structured configuration file and its command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actions::ChannelLayout;
use crate::draft::{DraftModelConfig, DraftTrainConfig};
use crate::envsim::{DatasetConfig, EnvConfig, ObjectVariant, SpeedGrid};
use crate::error::{Error, Result};
use crate::flowpolicy::{FlowTrainConfig, MainModelConfig};
use crate::latcost::{CostProfile, LatencyCoupling};
use crate::par::ExecMode;
use crate::runtime::{InferenceMode, RuntimePolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub mode: InferenceMode,
    pub profile: String,
}

impl MethodSpec {
    pub fn new(mode: InferenceMode, profile: &str) -> Self {
        Self {
            mode,
            profile: profile.to_string(),
        }
    }

    /// `full_only/torch`, `flash/flash_triton`, ...
    pub fn label(&self) -> String {
        let mode = match self.mode {
            InferenceMode::FullOnly => "full_only",
            InferenceMode::Flash => "flash",
        };
        format!("{mode}/{}", self.profile)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (mode, profile) = s
            .split_once('/')
            .ok_or_else(|| cfg_err("method", format!("`{s}` is not of the form mode/profile")))?;
        let mode = match mode {
            "full_only" => InferenceMode::FullOnly,
            "flash" => InferenceMode::Flash,
            other => return Err(cfg_err("method", format!("unknown mode `{other}`"))),
        };
        Ok(Self::new(mode, profile))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub coupling: LatencyCoupling,
    /// Extra named profiles next to the built-in ones.
    pub profiles: Vec<CostProfile>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            coupling: LatencyCoupling::default(),
            profiles: Vec::new(),
        }
    }
}

impl LatencyConfig {
    pub fn profile(&self, name: &str) -> Result<CostProfile> {
        match self.profiles.iter().find(|p| p.name == name) {
            Some(p) => {
                p.validate()?;
                Ok(p.clone())
            }
            None => CostProfile::builtin(name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierAblation {
    pub deltas: Vec<f64>,
    pub ks: Vec<usize>,
    pub refresh_every: usize,
    pub phase_fallback: bool,
}

impl Default for VerifierAblation {
    fn default() -> Self {
        Self {
            deltas: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            ks: vec![1, 2, 4],
            refresh_every: 0,
            phase_fallback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentAblation {
    pub refresh_every: Vec<usize>,
    pub phase_fallback: Vec<bool>,
}

impl Default for ComponentAblation {
    fn default() -> Self {
        Self {
            refresh_every: vec![0, 2, 3, 4],
            phase_fallback: vec![true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub trials: usize,
    pub speeds: SpeedGrid,
    pub variants: Vec<ObjectVariant>,
    pub methods: Vec<MethodSpec>,
    /// Method whose latency is the speedup denominator.
    pub baseline: MethodSpec,
    /// Named speed the ablation grids run at.
    pub ablation_speed: String,
    /// Method the ablation grids vary.
    pub ablation_method: MethodSpec,
    pub verifier_ablation: VerifierAblation,
    pub component_ablation: ComponentAblation,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            speeds: SpeedGrid::default(),
            variants: ObjectVariant::ALL.to_vec(),
            methods: vec![
                MethodSpec::new(InferenceMode::FullOnly, "torch"),
                MethodSpec::new(InferenceMode::FullOnly, "triton"),
                MethodSpec::new(InferenceMode::Flash, "flash_triton"),
            ],
            baseline: MethodSpec::new(InferenceMode::FullOnly, "torch"),
            ablation_speed: "demo".into(),
            ablation_method: MethodSpec::new(InferenceMode::Flash, "flash_triton"),
            verifier_ablation: VerifierAblation::default(),
            component_ablation: ComponentAblation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: "out".into(),
            checkpoint: "out/models.ckpt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root of every training seed.
    pub seed: u64,
    pub exec: ExecMode,
    pub layout: ChannelLayout,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub main_model: MainModelConfig,
    pub main_train: FlowTrainConfig,
    pub draft_model: DraftModelConfig,
    pub draft_train: DraftTrainConfig,
    pub runtime: RuntimePolicy,
    pub latency: LatencyConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            exec: ExecMode::Parallel,
            layout: ChannelLayout::planar(),
            env: EnvConfig::default(),
            dataset: DatasetConfig::default(),
            main_model: MainModelConfig::default(),
            main_train: FlowTrainConfig::default(),
            draft_model: DraftModelConfig::default(),
            draft_train: DraftTrainConfig::default(),
            runtime: RuntimePolicy::default(),
            latency: LatencyConfig::default(),
            bench: BenchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

pub(crate) fn cfg_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            cfg_err(&path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(&path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| cfg_err(".", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |path: &str, r: Result<()>| r.map_err(|e| cfg_err(path, e.to_string()));
        wrap("env", self.env.validate())?;
        wrap("bench.speeds", self.bench.speeds.validate())?;
        wrap("runtime", self.runtime.validate(self.dataset.horizon))?;
        wrap("draft_train", self.draft_train.validate(self.dataset.horizon))?;
        wrap("latency.coupling", self.latency.coupling.validate())?;
        if self.dataset.replan != self.runtime.replan {
            return Err(cfg_err("dataset.replan", "must equal runtime.replan"));
        }
        for (i, m) in self.bench.methods.iter().chain([&self.bench.baseline, &self.bench.ablation_method]).enumerate() {
            let p = self
                .latency
                .profile(&m.profile)
                .map_err(|e| cfg_err(&format!("bench.methods[{i}].profile"), e.to_string()))?;
            if m.mode == InferenceMode::Flash && p.flash.is_none() {
                return Err(cfg_err(
                    &format!("bench.methods[{i}]"),
                    format!("profile `{}` has no flash stages", p.name),
                ));
            }
        }
        if self.bench.speeds.get(&self.bench.ablation_speed).is_none() {
            return Err(cfg_err("bench.ablation_speed", format!("unknown speed `{}`", self.bench.ablation_speed)));
        }
        if self.bench.trials == 0 {
            return Err(cfg_err("bench.trials", "must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of every result-affecting key.
    /// Object keys are sorted, so key order in the file does not matter;
    /// output locations and the thread mode are left out.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("paths");
            map.remove("exec");
        }
        let canon = serde_json::to_string(&v).expect("value serializes");
        hex(&Sha256::digest(canon.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Values given on the command line that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub profile: Option<String>,
    pub speed: Option<String>,
    pub delta: Option<f64>,
    pub timesteps: Option<Vec<f64>>,
    pub pf: Option<usize>,
    pub fb: Option<bool>,
    pub trials: Option<usize>,
}

impl Overrides {
    /// Applies every set field. `seed` is left to the caller since its
    /// meaning depends on the subcommand.
    pub fn apply(&self, cfg: &mut Config) -> Result<()> {
        if let Some(d) = &self.out_dir {
            cfg.paths.checkpoint = d.join(cfg.paths.checkpoint.file_name().unwrap_or("models.ckpt".as_ref()));
            cfg.paths.out_dir = d.clone();
        }
        if let Some(p) = &self.profile {
            cfg.latency.profile(p).map_err(|e| cfg_err("--profile", e.to_string()))?;
            for m in cfg.bench.methods.iter_mut().filter(|m| m.mode == InferenceMode::Flash) {
                m.profile = p.clone();
            }
            if cfg.bench.ablation_method.mode == InferenceMode::Flash {
                cfg.bench.ablation_method.profile = p.clone();
            }
        }
        if let Some(s) = &self.speed {
            if cfg.bench.speeds.get(s).is_none() {
                return Err(cfg_err("--speed", format!("unknown speed `{s}` (expected demo, medium, high or extra_high)")));
            }
            cfg.bench.ablation_speed = s.clone();
        }
        if let Some(d) = self.delta {
            cfg.runtime.verifier.delta = d;
        }
        if let Some(t) = &self.timesteps {
            cfg.runtime.verifier.timesteps = t.clone();
        }
        if let Some(pf) = self.pf {
            cfg.runtime.refresh_every = pf;
        }
        if let Some(fb) = self.fb {
            cfg.runtime.phase_fallback = fb;
        }
        if let Some(n) = self.trials {
            cfg.bench.trials = n;
        }
        cfg.validate()
    }
}
