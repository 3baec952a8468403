//! Action chunks, their channel layout, and per-channel standardization.
//!
//! A chunk is an `H x D` row-major matrix. Every per-step action is laid out
//! as `[position.., rotation.., gripper]`; the gripper is always the last
//! channel. Chunks carry a [`Space`] tag so raw environment units and
//! standardized model units cannot be mixed up silently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible standard deviation after fitting.
pub const MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub pos_dims: usize,
    pub rot_dims: usize,
}

impl ChannelLayout {
    pub fn new(pos_dims: usize, rot_dims: usize) -> Result<Self> {
        if pos_dims + rot_dims == 0 {
            return Err(Error::invalid(
                "channel layout",
                "need at least one continuous channel (D >= 2)",
            ));
        }
        Ok(Self { pos_dims, rot_dims })
    }

    /// Planar conveyor layout: `(dx, dy, gripper)`.
    pub fn planar() -> Self {
        Self {
            pos_dims: 2,
            rot_dims: 0,
        }
    }

    /// Total channels per step, gripper included.
    pub fn dim(&self) -> usize {
        self.pos_dims + self.rot_dims + 1
    }

    pub fn continuous_dims(&self) -> usize {
        self.pos_dims + self.rot_dims
    }

    pub fn gripper_index(&self) -> usize {
        self.pos_dims + self.rot_dims
    }
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self::planar()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Raw,
    Standardized,
}

impl Space {
    fn name(self) -> &'static str {
        match self {
            Space::Raw => "raw",
            Space::Standardized => "standardized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    values: Vec<f64>,
    horizon: usize,
    layout: ChannelLayout,
    space: Space,
}

impl ActionChunk {
    pub fn new(values: Vec<f64>, horizon: usize, layout: ChannelLayout, space: Space) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("action chunk", "horizon must be positive"));
        }
        if values.len() != horizon * layout.dim() {
            return Err(Error::dim("action chunk values", horizon * layout.dim(), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "action chunk at step {}, channel {}",
                i / layout.dim(),
                i % layout.dim()
            )));
        }
        Ok(Self {
            values,
            horizon,
            layout,
            space,
        })
    }

    pub fn zeros(horizon: usize, layout: ChannelLayout, space: Space) -> Self {
        Self {
            values: vec![0.0; horizon * layout.dim()],
            horizon,
            layout,
            space,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn layout(&self) -> ChannelLayout {
        self.layout
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, h: usize) -> &[f64] {
        let d = self.layout.dim();
        &self.values[h * d..(h + 1) * d]
    }

    pub fn gripper(&self, h: usize) -> f64 {
        self.row(h)[self.layout.gripper_index()]
    }

    pub fn step(&self, h: usize) -> StepRef<'_> {
        StepRef {
            values: self.row(h),
            layout: self.layout,
            space: self.space,
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.layout.dim())
    }

    /// Same shape and tag, new values. Used by elementwise kernels that have
    /// already produced a buffer of the right length.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.horizon, self.layout, self.space)
    }

    pub(crate) fn same_shape(&self, other: &ActionChunk) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::invalid("action chunk", "channel layouts differ"));
        }
        if self.horizon != other.horizon {
            return Err(Error::dim("chunk horizon", self.horizon, other.horizon));
        }
        Ok(())
    }

    pub(crate) fn expect_space(&self, space: Space) -> Result<()> {
        if self.space != space {
            return Err(Error::Space {
                expected: space.name(),
                got: self.space.name(),
            });
        }
        Ok(())
    }
}

/// A single per-step action borrowed from a chunk.
#[derive(Debug, Clone, Copy)]
pub struct StepRef<'a> {
    pub values: &'a [f64],
    pub layout: ChannelLayout,
    pub space: Space,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    L2,
    Linf,
}

/// Distance between two per-step actions over the position and rotation
/// channels only; the gripper channel never contributes.
pub fn continuous_distance(a: StepRef<'_>, b: StepRef<'_>, metric: DistanceMetric) -> Result<f64> {
    if a.layout != b.layout {
        return Err(Error::invalid("continuous distance", "channel layouts differ"));
    }
    for s in [a.space, b.space] {
        if s != Space::Standardized {
            return Err(Error::Space {
                expected: "standardized",
                got: s.name(),
            });
        }
    }
    let n = a.layout.continuous_dims();
    Ok(cont_distance(&a.values[..n], &b.values[..n], metric))
}

pub(crate) fn cont_distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> f64 {
    let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    match metric {
        DistanceMetric::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        DistanceMetric::Linf => diffs.fold(0.0, f64::max),
    }
}

/// Per-channel affine normalization shared by the policy, the draft model,
/// and the gripper-switch detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::dim("standardizer std", mean.len(), std.len()));
        }
        if let Some(i) = std.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(
                "standardizer",
                format!("std[{i}] = {} must be positive", std[i]),
            ));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::non_finite("standardizer mean"));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits per-channel mean and population standard deviation over a set of
    /// equally sized rows. Tiny deviations are clamped to [`MIN_STD`].
    pub fn fit<'a, I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::dim("standardizer fit row", dim, row.len()));
            }
            for (j, &x) in row.iter().enumerate() {
                sum[j] += x;
                sq[j] += x * x;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("standardizer fit", "no rows"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / nf - m * m).max(0.0).sqrt().max(MIN_STD))
            .collect();
        Self::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn standardize(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        chunk.expect_space(Space::Raw)?;
        self.check_dim(chunk.layout().dim())?;
        let values = self.apply(chunk.as_slice(), |x, m, s| (x - m) / s);
        ActionChunk::new(values, chunk.horizon(), chunk.layout(), Space::Standardized)
    }

    pub fn destandardize(&self, chunk: &ActionChunk) -> Result<ActionChunk> {
        chunk.expect_space(Space::Standardized)?;
        self.check_dim(chunk.layout().dim())?;
        let values = self.apply(chunk.as_slice(), |x, m, s| x * s + m);
        ActionChunk::new(values, chunk.horizon(), chunk.layout(), Space::Raw)
    }

    /// Normalizes a single feature vector (no space tag involved).
    pub fn normalize_vec(&self, x: &[f64]) -> Vec<f64> {
        self.apply(x, |x, m, s| (x - m) / s)
    }

    pub fn standardize_channel(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::dim("standardizer channels", self.dim(), d));
        }
        Ok(())
    }

    fn apply(&self, xs: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
        let d = self.dim();
        xs.iter()
            .enumerate()
            .map(|(i, &x)| f(x, self.mean[i % d], self.std[i % d]))
            .collect()
    }
}
