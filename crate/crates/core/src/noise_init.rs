//! Initial-noise strategies for joint multi-view sampling.
//!
//! A [`NoiseBundle`] holds every random and geometric ingredient for one
//! scene; the functions here combine them into the per-view starting
//! latent `z_T` and the coordinate noise that drives the attention targets.

use serde::{Deserialize, Serialize};

use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::frequency::{apply_mask, hpf_mask, FilterKind};
use crate::geometry::{coordinate_field, ViewSet};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// Per-scene noise ingredients.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBundle {
    pub eps_shared: Tensor,
    pub eps_view: Vec<Tensor>,
    /// Coordinate fields tiled to the latent channel count, values in `[-1, 1]`.
    pub coord: Vec<Tensor>,
    pub w: f64,
    pub alpha_bar_t: f64,
}

/// Draws one shared and `n_views` independent Gaussian tensors plus the
/// coordinate field of every view.
pub fn sample_bundle(vs: &ViewSet, schedule: &Schedule, channels: usize, w: f64, seed: u64) -> Result<NoiseBundle> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::config(format!("noise weight w = {w} outside [0, 1]")));
    }
    let shape = [channels, vs.height, vs.width];
    let eps_shared = rng::randn(&shape, &mut rng::stream(seed, domain::SHARED_NOISE, 0, 0));
    let eps_view = (0..vs.n_views)
        .map(|i| rng::randn(&shape, &mut rng::stream(seed, domain::VIEW_NOISE, i as u64, 0)))
        .collect();
    let coord = (0..vs.n_views)
        .map(|i| coordinate_field(vs, i)?.tile_channels(channels))
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseBundle {
        eps_shared,
        eps_view,
        coord,
        w,
        alpha_bar_t: schedule.alpha_bar[schedule.t_max],
    })
}

impl NoiseBundle {
    pub fn n_views(&self) -> usize {
        self.eps_view.len()
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.n_views() {
            return Err(Error::Index(format!("view {i} of {}", self.n_views())));
        }
        Ok(())
    }

    /// Replaces the coordinate fields, e.g. with normalized depth.
    pub fn with_coord_fields(mut self, fields: Vec<Tensor>) -> Result<Self> {
        if fields.len() != self.n_views() {
            return Err(Error::shape("one coordinate field per view"));
        }
        let c = self.eps_shared.shape()[0];
        self.coord = fields
            .into_iter()
            .map(|f| f.tile_channels(c))
            .collect::<Result<Vec<_>>>()?;
        for f in &self.coord {
            f.ensure_same_shape(&self.eps_shared, "coordinate field")?;
        }
        Ok(self)
    }
}

/// `w c^i + (1 - w) eps_shared`.
pub fn coordinate_noise(b: &NoiseBundle, i: usize) -> Result<Tensor> {
    b.check(i)?;
    if b.w == 0.0 {
        return Ok(b.eps_shared.clone());
    }
    if b.w == 1.0 {
        return Ok(b.coord[i].clone());
    }
    b.coord[i].lincomb(b.w, &b.eps_shared, 1.0 - b.w)
}

/// `sqrt(abar_T) eps_hat^i + sqrt(1 - abar_T) eps^i`.
pub fn init_latent(b: &NoiseBundle, i: usize) -> Result<Tensor> {
    latent_at(b, i, b.alpha_bar_t)
}

/// Same blend as [`init_latent`] at an arbitrary signal level `alpha_bar`.
pub fn latent_at(b: &NoiseBundle, i: usize, alpha_bar: f64) -> Result<Tensor> {
    let hat = coordinate_noise(b, i)?;
    hat.lincomb(alpha_bar.sqrt(), &b.eps_view[i], (1.0 - alpha_bar).sqrt())
}

/// `eps_shared a^2/(1+a^2) + eps^i / (1+a^2)`.
pub fn mixed_noise(b: &NoiseBundle, i: usize, alpha_mix: f64) -> Result<Tensor> {
    b.check(i)?;
    if alpha_mix < 0.0 {
        return Err(Error::config(format!("alpha_mix = {alpha_mix} must be non-negative")));
    }
    let a2 = alpha_mix * alpha_mix;
    b.eps_shared.lincomb(a2 / (1.0 + a2), &b.eps_view[i], 1.0 / (1.0 + a2))
}

/// Low-passed coordinate field plus high-passed independent noise, split
/// at normalized radius `stop_freq`.
pub fn low_freq_coordinate_noise(b: &NoiseBundle, i: usize, stop_freq: f64) -> Result<Tensor> {
    b.check(i)?;
    if !(0.0..=1.0).contains(&stop_freq) {
        return Err(Error::config(format!("stop_freq = {stop_freq} outside [0, 1]")));
    }
    let (_, h, w) = b.coord[i].chw()?;
    let low = apply_mask(&b.coord[i], &hpf_mask(stop_freq, h, w, FilterKind::BinaryLpf))?;
    let high = apply_mask(&b.eps_view[i], &hpf_mask(stop_freq, h, w, FilterKind::BinaryHpf))?;
    low.add(&high)
}

/// Initialization method used for sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Independent,
    Shared,
    Mixed,
    Coordinate,
    LowFreqCoordinate,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 5] = [
        NoiseMode::Independent,
        NoiseMode::Shared,
        NoiseMode::Mixed,
        NoiseMode::Coordinate,
        NoiseMode::LowFreqCoordinate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Independent => "independent",
            NoiseMode::Shared => "shared",
            NoiseMode::Mixed => "mixed",
            NoiseMode::Coordinate => "coordinate",
            NoiseMode::LowFreqCoordinate => "low_freq_coordinate",
        }
    }
}

/// Mode-specific settings beyond the bundle itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSettings {
    pub mode: NoiseMode,
    pub alpha_mix: f64,
    pub stop_freq: f64,
}

/// Starting latent `z_T` for view `i`.
pub fn initial_latent(b: &NoiseBundle, i: usize, s: &NoiseSettings) -> Result<Tensor> {
    b.check(i)?;
    match s.mode {
        NoiseMode::Independent => Ok(b.eps_view[i].clone()),
        NoiseMode::Shared => {
            let shared = NoiseBundle { w: 0.0, ..b.clone() };
            init_latent(&shared, i)
        }
        NoiseMode::Coordinate => init_latent(b, i),
        NoiseMode::Mixed => mixed_noise(b, i, s.alpha_mix),
        NoiseMode::LowFreqCoordinate => low_freq_coordinate_noise(b, i, s.stop_freq),
    }
}

/// The noise that stands in for `eps_hat^i` when collecting attention
/// targets: the mode's own cross-view component.
pub fn guidance_noise(b: &NoiseBundle, i: usize, s: &NoiseSettings) -> Result<Tensor> {
    b.check(i)?;
    match s.mode {
        NoiseMode::Independent => Ok(b.eps_view[i].clone()),
        NoiseMode::Shared | NoiseMode::Mixed => Ok(b.eps_shared.clone()),
        NoiseMode::Coordinate | NoiseMode::LowFreqCoordinate => coordinate_noise(b, i),
    }
}

/// Normalizes per-view depth maps to `[-1, 1]` with the scene-wide range.
pub fn normalized_depth_fields(depths: &[Tensor]) -> Result<Vec<Tensor>> {
    let lo = depths.iter().flat_map(|d| d.data()).cloned().fold(f64::INFINITY, f64::min);
    let hi = depths.iter().flat_map(|d| d.data()).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Numerical("depth range is not finite".into()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(depths
        .iter()
        .map(|d| d.map(|v| 2.0 * (v - lo) / span - 1.0))
        .collect())
}
