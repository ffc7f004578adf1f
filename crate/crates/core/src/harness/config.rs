//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::VOCAB;
use crate::attention::FbaSettings;
use crate::denoiser::params::hex;
use crate::denoiser::{Architecture, Level, RunSettings, TrainConfig, XaLayer};
use crate::diffusion::{make_schedule, Schedule};
use crate::error::{Error, Result};
use crate::frequency::{FilterDirection, FilterKind};
use crate::geometry::{make_view_ring, ViewSet};
use crate::noise_init::{NoiseMode, NoiseSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewsConfig {
    pub n: usize,
    pub fov_deg: f64,
    pub image_size: usize,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        ViewsConfig {
            n: 8,
            fov_deg: 90.0,
            image_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scenes: usize,
    /// The last `eval_scenes` scene ids form the evaluation split.
    pub eval_scenes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenes: 40,
            eval_scenes: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub w: f64,
    pub alpha_mix: f64,
    pub stop_freq: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mode: NoiseMode::Coordinate,
            w: 0.5,
            alpha_mix: 1.0,
            stop_freq: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbaConfig {
    pub enabled: bool,
    pub layers: Vec<Level>,
    pub filter_kind: FilterKind,
    pub filter_direction: FilterDirection,
    pub radius_encoding: bool,
    pub scaled: bool,
    pub non_overlap: bool,
    pub pe_bands: usize,
}

impl Default for FbaConfig {
    fn default() -> Self {
        let s = FbaSettings::default();
        FbaConfig {
            enabled: true,
            layers: vec![Level::Level1, Level::Level2],
            filter_kind: s.filter_kind,
            filter_direction: s.filter_direction,
            radius_encoding: s.radius_encoding,
            scaled: s.scaled,
            non_overlap: s.non_overlap,
            pe_bands: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XaConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub layers: Vec<XaLayer>,
    pub token_dim: usize,
    pub key_dim: usize,
}

impl Default for XaConfig {
    fn default() -> Self {
        XaConfig {
            enabled: true,
            lambda: 10.0,
            layers: vec![XaLayer::Mid],
            token_dim: 16,
            key_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: [usize; 2],
    pub time_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [16, 32],
            time_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBudget {
    pub base_steps: usize,
    pub fba_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub views_per_sample: usize,
}

impl Default for TrainBudget {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainBudget {
            base_steps: 1500,
            fba_steps: 300,
            batch: t.batch,
            lr: t.lr,
            grad_clip: t.grad_clip,
            views_per_sample: t.views_per_sample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Evaluation scenes to sample; 0 means all of them.
    pub scenes: usize,
    /// Recompute guidance features at every reverse step.
    pub recollect_g: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            scenes: 0,
            recollect_g: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub psnr_cap_db: f64,
    pub include_wrap: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            psnr_cap_db: 100.0,
            include_wrap: true,
        }
    }
}

/// Named ablation grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    W,
    FilterKind,
    FilterDirection,
    Noise,
}

impl Grid {
    pub const ALL: [Grid; 4] = [Grid::W, Grid::FilterKind, Grid::FilterDirection, Grid::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Grid::W => "w",
            Grid::FilterKind => "filter_kind",
            Grid::FilterDirection => "filter_direction",
            Grid::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Result<Grid> {
        Grid::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::config(format!("unknown grid `{s}`; expected w, filter_kind, filter_direction or noise")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub grids: Vec<Grid>,
    pub w_values: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            grids: Grid::ALL.to_vec(),
            w_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Every knob of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(rename = "T")]
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Run directory; not part of the config hash.
    pub out_dir: PathBuf,
    pub views: ViewsConfig,
    pub dataset: DatasetConfig,
    pub noise: NoiseConfig,
    pub fba: FbaConfig,
    pub xa: XaConfig,
    pub model: ModelConfig,
    pub train: TrainBudget,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            t_max: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            out_dir: PathBuf::from("runs/default"),
            views: ViewsConfig::default(),
            dataset: DatasetConfig::default(),
            noise: NoiseConfig::default(),
            fba: FbaConfig::default(),
            xa: XaConfig::default(),
            model: ModelConfig::default(),
            train: TrainBudget::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Tiny preset for an end-to-end run in a few minutes.
    pub fn smoke() -> Self {
        ExperimentConfig {
            t_max: 50,
            out_dir: PathBuf::from("runs/smoke"),
            dataset: DatasetConfig {
                scenes: 4,
                eval_scenes: 1,
            },
            train: TrainBudget {
                base_steps: 500,
                fba_steps: 100,
                ..TrainBudget::default()
            },
            ablate: AblateConfig {
                w_values: vec![0.0, 0.5, 1.0],
                ..AblateConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.eval_scenes == 0 || self.dataset.eval_scenes >= self.dataset.scenes {
            return Err(Error::config(format!(
                "dataset needs at least one train and one eval scene, got {} of {}",
                self.dataset.eval_scenes, self.dataset.scenes
            )));
        }
        if !(0.0..=1.0).contains(&self.noise.w) {
            return Err(Error::config(format!("noise.w = {} outside [0, 1]", self.noise.w)));
        }
        if !(0.0..=1.0).contains(&self.noise.stop_freq) {
            return Err(Error::config(format!("noise.stop_freq = {} outside [0, 1]", self.noise.stop_freq)));
        }
        if !(self.noise.alpha_mix.is_finite() && self.noise.alpha_mix >= 0.0) {
            return Err(Error::config("noise.alpha_mix must be finite and non-negative"));
        }
        if !(self.xa.lambda.is_finite() && self.xa.lambda >= 0.0) {
            return Err(Error::config("xa.lambda must be finite and non-negative"));
        }
        if self.train.views_per_sample == 0 || self.train.views_per_sample > self.views.n {
            return Err(Error::config(format!(
                "train.views_per_sample = {} for a ring of {} views",
                self.train.views_per_sample, self.views.n
            )));
        }
        if self.train.batch == 0 || !(self.train.lr > 0.0) {
            return Err(Error::config("train.batch and train.lr must be positive"));
        }
        if self.ablate.w_values.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::config("ablate.w_values must lie in [0, 1]"));
        }
        self.schedule()?;
        self.view_set()?;
        self.architecture().validate()
    }

    /// SHA-256 of the config with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn view_set(&self) -> Result<ViewSet> {
        make_view_ring(self.views.n, self.views.fov_deg, self.views.image_size, self.views.image_size)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            image_size: self.views.image_size,
            widths: self.model.widths,
            time_dim: self.model.time_dim,
            fba_levels: self.fba.layers.clone(),
            pe_bands: self.fba.pe_bands,
            xa_layers: self.xa.layers.clone(),
            vocab: VOCAB,
            token_dim: self.xa.token_dim,
            key_dim: self.xa.key_dim,
        }
    }

    pub fn fba_settings(&self) -> FbaSettings {
        FbaSettings {
            filter_kind: self.fba.filter_kind,
            filter_direction: self.fba.filter_direction,
            radius_encoding: self.fba.radius_encoding,
            scaled: self.fba.scaled,
            non_overlap: self.fba.non_overlap,
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            fba_enabled: self.fba.enabled,
            fba: self.fba_settings(),
            xa_enabled: self.xa.enabled,
            ..RunSettings::default()
        }
    }

    pub fn noise_settings(&self) -> NoiseSettings {
        NoiseSettings {
            mode: self.noise.mode,
            alpha_mix: self.noise.alpha_mix,
            stop_freq: self.noise.stop_freq,
        }
    }

    /// Optimizer settings of the base (`fba == false`) or FBA stage.
    pub fn train_config(&self, fba: bool) -> TrainConfig {
        TrainConfig {
            steps: if fba { self.train.fba_steps } else { self.train.base_steps },
            batch: self.train.batch,
            lr: self.train.lr,
            grad_clip: self.train.grad_clip,
            views_per_sample: self.train.views_per_sample,
            lambda: if self.xa.enabled { self.xa.lambda } else { 0.0 },
            w: self.noise.w,
        }
    }
}
