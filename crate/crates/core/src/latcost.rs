//! Per-round inference cost profiles and the mapping from latency to
//! simulated control ticks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullStages {
    pub image_encoder: f64,
    pub prefill: f64,
    pub denoise: f64,
}

impl FullStages {
    pub fn total(&self) -> f64 {
        self.image_encoder + self.prefill + self.denoise
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlashStages {
    pub image_encoder: f64,
    pub draft: f64,
    pub verify: f64,
}

impl FlashStages {
    pub fn total(&self) -> f64 {
        self.image_encoder + self.draft + self.verify
    }
}

/// Stage latencies in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    pub name: String,
    pub full: FullStages,
    #[serde(default)]
    pub flash: Option<FlashStages>,
}

pub const BUILTIN_PROFILES: [&str; 4] = ["torch", "triton", "flash", "flash_triton"];

impl CostProfile {
    const TORCH_FULL: FullStages = FullStages {
        image_encoder: 11.3,
        prefill: 26.7,
        denoise: 20.0,
    };
    const TRITON_FULL: FullStages = FullStages {
        image_encoder: 4.7,
        prefill: 22.4,
        denoise: 12.6,
    };

    pub fn builtin(name: &str) -> Result<Self> {
        let (full, flash) = match name {
            "torch" => (Self::TORCH_FULL, None),
            "triton" => (Self::TRITON_FULL, None),
            "flash" => (
                Self::TORCH_FULL,
                Some(FlashStages {
                    image_encoder: 11.0,
                    draft: 3.5,
                    verify: 3.4,
                }),
            ),
            "flash_triton" => (
                Self::TRITON_FULL,
                Some(FlashStages {
                    image_encoder: 4.7,
                    draft: 0.9,
                    verify: 2.2,
                }),
            ),
            other => {
                return Err(Error::invalid(
                    "cost profile",
                    format!("unknown profile `{other}` (expected one of {})", BUILTIN_PROFILES.join(", ")),
                ))
            }
        };
        Ok(Self {
            name: name.to_string(),
            full,
            flash,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.full;
        let mut stages = vec![f.image_encoder, f.prefill, f.denoise];
        if let Some(s) = self.flash {
            stages.extend([s.image_encoder, s.draft, s.verify]);
        }
        if stages.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "cost profile",
                format!("`{}` has a negative or non-finite stage latency", self.name),
            ));
        }
        Ok(())
    }

    pub fn full_total(&self) -> f64 {
        self.full.total()
    }

    pub fn flash_total(&self) -> Option<f64> {
        self.flash.map(|s| s.total())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Full,
    Flash,
}

pub fn round_cost(profile: &CostProfile, path: PathKind) -> Result<f64> {
    match path {
        PathKind::Full => Ok(profile.full_total()),
        PathKind::Flash => profile.flash_total().ok_or_else(|| {
            Error::invalid(
                "cost profile",
                format!("`{}` has no flash-path stages", profile.name),
            )
        }),
    }
}

/// How a flash round that falls back to the full path is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackAccounting {
    /// Flash attempt plus full round.
    #[default]
    Additive,
    /// Only the full round.
    FullOnly,
}

impl FallbackAccounting {
    pub fn fallback_cost(self, profile: &CostProfile) -> Result<f64> {
        let full = profile.full_total();
        Ok(match self {
            Self::Additive => round_cost(profile, PathKind::Flash)? + full,
            Self::FullOnly => full,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyCoupling {
    pub control_tick_ms: f64,
}

impl Default for LatencyCoupling {
    fn default() -> Self {
        Self { control_tick_ms: 10.0 }
    }
}

impl LatencyCoupling {
    pub fn validate(&self) -> Result<()> {
        if !(self.control_tick_ms.is_finite() && self.control_tick_ms > 0.0) {
            return Err(Error::invalid("control tick", "must be positive"));
        }
        Ok(())
    }

    /// Control ticks that elapse while an inference of `latency_ms` blocks
    /// the robot. Rounds up; the small tolerance keeps exact multiples such
    /// as 40.0 / 10.0 from being pushed to the next tick by float noise.
    pub fn stall_ticks(&self, latency_ms: f64) -> u64 {
        if latency_ms <= 0.0 {
            return 0;
        }
        (latency_ms / self.control_tick_ms - 1e-9).ceil().max(0.0) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendedLatency {
    pub lat_ms: f64,
    pub mean_executed: f64,
    pub per_action_ms: f64,
}

/// Expected per-round latency when a fraction `flash_rate` of rounds take
/// the flash path and execute `accepted_prefix` actions on average, while
/// the rest run the full path and execute `replan` actions.
pub fn blended_latency(flash_rate: f64, accepted_prefix: f64, replan: usize, profile: &CostProfile) -> Result<BlendedLatency> {
    if !(0.0..=1.0).contains(&flash_rate) {
        return Err(Error::invalid("flash rate", format!("{flash_rate} outside [0, 1]")));
    }
    let flash = if flash_rate > 0.0 {
        round_cost(profile, PathKind::Flash)?
    } else {
        0.0
    };
    let lat_ms = flash_rate * flash + (1.0 - flash_rate) * profile.full_total();
    let mean_executed = flash_rate * accepted_prefix + (1.0 - flash_rate) * replan as f64;
    if mean_executed <= 0.0 {
        return Err(Error::invalid("blended latency", "no actions executed per round"));
    }
    Ok(BlendedLatency {
        lat_ms,
        mean_executed,
        per_action_ms: lat_ms / mean_executed,
    })
}
