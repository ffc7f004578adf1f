//! The stages of an experiment, each reading its inputs from and writing
//! its artifacts to the run directory.
//!
//! Layout under `out_dir`:
//! `data/` scenes and renders, `base/` and `fba/` checkpoints, train states
//! and loss logs, `samples/<label>/` generated views, `eval/` per-scene
//! records and the summary table, `ablate/<grid>/` sweep results. Every
//! stage directory holds a `config.toml` copy and its `config_hash`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Grid};
use super::io::{load_png, quantize, read_json, save_png, write_json};
use super::scene::{Split, SyntheticScene, World};
use crate::denoiser::checkpoint::{load_checkpoint, load_train_state, save_checkpoint, save_train_state};
use crate::denoiser::sample::{from_image, sample_multiview, SampleOptions};
use crate::denoiser::{train_base, train_fba, DenoiserParams, LossRecord, MultiViewExample, Phase, TrainState};
use crate::error::{Error, Result};
use crate::frequency::{FilterDirection, FilterKind};
use crate::geometry::ViewSet;
use crate::metrics::{mean_ci95, PsnrOptions, SceneReport};
use crate::noise_init::{sample_bundle, NoiseMode};
use crate::rng::{derive_seed, domain};
use crate::tensor::Tensor;

/// Label under which ground-truth renders are evaluated.
pub const GROUND_TRUTH: &str = "ground_truth";

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        RunDir(cfg.out_dir.clone())
    }

    pub fn data(&self) -> PathBuf {
        self.0.join("data")
    }

    pub fn base(&self) -> PathBuf {
        self.0.join("base")
    }

    pub fn fba(&self) -> PathBuf {
        self.0.join("fba")
    }

    pub fn samples(&self) -> PathBuf {
        self.0.join("samples")
    }

    pub fn eval(&self) -> PathBuf {
        self.0.join("eval")
    }

    pub fn ablate(&self, grid: Grid) -> PathBuf {
        self.0.join("ablate").join(grid.name())
    }
}

fn view_png(dir: &Path, scene: usize, view: usize) -> PathBuf {
    dir.join(format!("scene_{scene:04}")).join(format!("view_{view:02}.png"))
}

/// Writes the config copy and hash that make a stage directory self-describing.
fn write_stage_header(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    fs::write(dir.join("config_hash"), cfg.hash() + "\n")?;
    Ok(())
}

fn stage_hash(dir: &Path) -> Option<String> {
    fs::read_to_string(dir.join("config_hash")).ok().map(|s| s.trim().to_string())
}

fn missing(what: &str, dir: &Path, command: &str) -> Error {
    Error::Precondition(format!(
        "no {what} in {}; run `mvdiff {command}` with the same --config and --out first",
        dir.display()
    ))
}

/// A scene as stored in the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: usize,
    pub split: Split,
    pub world: World,
    pub prompts: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub seed: u64,
    pub view_set: ViewSet,
    pub scenes: Vec<SceneRecord>,
}

/// Deterministically generates every scene of the configured dataset.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    let vs = cfg.view_set()?;
    let n = cfg.dataset.scenes;
    let first_eval = n - cfg.dataset.eval_scenes;
    Ok((0..n)
        .into_par_iter()
        .map(|id| {
            let world = World::random(cfg.seed, id);
            let views = world.render(&vs);
            SyntheticScene {
                id,
                split: if id < first_eval { Split::Train } else { Split::Eval },
                world,
                views,
            }
        })
        .collect())
}

/// `gen-data`: renders the dataset to PNGs plus a JSON manifest.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let scenes = generate_dataset(cfg)?;
    let dir = RunDir::new(cfg).data();
    write_stage_header(&dir, cfg)?;
    scenes.par_iter().try_for_each(|s| {
        s.views
            .images
            .iter()
            .enumerate()
            .try_for_each(|(v, img)| save_png(&view_png(&dir, s.id, v), img))
    })?;
    let manifest = DatasetManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        view_set: cfg.view_set()?,
        scenes: scenes
            .into_iter()
            .map(|s| SceneRecord {
                id: s.id,
                split: s.split,
                world: s.world,
                prompts: s.views.prompts,
            })
            .collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// A dataset read back from disk, images in `[0, 1]`.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Vec<Tensor>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (&SceneRecord, &Vec<Tensor>)> {
        self.manifest
            .scenes
            .iter()
            .zip(&self.images)
            .filter(move |(s, _)| s.split == split)
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = RunDir::new(cfg).data();
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(missing("dataset", &dir, "gen-data"));
    }
    let manifest: DatasetManifest = read_json(&path)?;
    let images = manifest
        .scenes
        .par_iter()
        .map(|s| {
            (0..manifest.view_set.n_views)
                .map(|v| load_png(&view_png(&dir, s.id, v)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, images })
}

fn write_log(path: &Path, history: &[LossRecord]) -> Result<()> {
    let text: String = history
        .iter()
        .enumerate()
        .map(|(k, r)| {
            serde_json::json!({"step": k + 1, "ldm": r.ldm, "xa": r.xa, "total": r.total}).to_string() + "\n"
        })
        .collect();
    fs::write(path, text)?;
    Ok(())
}

/// Loads a resumable train state when it was written under the same config.
fn resume(dir: &Path, cfg: &ExperimentConfig, phase: Phase) -> Result<Option<(DenoiserParams, TrainState)>> {
    let path = dir.join("state.bin");
    if !path.exists() || stage_hash(dir).as_deref() != Some(cfg.hash().as_str()) {
        return Ok(None);
    }
    let (params, state) = load_train_state(&path)?;
    if state.phase != phase || params.arch != cfg.architecture() {
        return Ok(None);
    }
    Ok(Some((params, state)))
}

fn check_architecture(params: &DenoiserParams, cfg: &ExperimentConfig, path: &Path, command: &str) -> Result<()> {
    if params.arch.hash() != cfg.architecture().hash() {
        return Err(Error::Precondition(format!(
            "checkpoint {} was trained for another architecture; rerun `mvdiff {command}` with this config",
            path.display()
        )));
    }
    Ok(())
}

fn load_model(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<DenoiserParams> {
    let path = dir.join("model.ckpt");
    if !path.exists() {
        return Err(missing("checkpoint", dir, command));
    }
    let params = load_checkpoint(&path)?;
    check_architecture(&params, cfg, &path, command)?;
    Ok(params)
}

/// `train-base`: trains the single-view denoiser on every train-split view.
pub fn train_base_stage(cfg: &ExperimentConfig, on_step: impl FnMut(usize, &LossRecord)) -> Result<DenoiserParams> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let images: Vec<Tensor> = data.split(Split::Train).flat_map(|(_, v)| v.iter().map(from_image)).collect();
    let dir = RunDir::new(cfg).base();
    let (mut params, mut state) = match resume(&dir, cfg, Phase::Base)? {
        Some(p) => p,
        None => {
            let params = DenoiserParams::init(&cfg.architecture(), cfg.seed)?;
            let state = TrainState::new(Phase::Base, &params, cfg.seed);
            (params, state)
        }
    };
    let schedule = cfg.schedule()?;
    train_base(&mut params, &images, &schedule, &cfg.train_config(false), &mut state, on_step)?;
    write_stage_header(&dir, cfg)?;
    save_checkpoint(&dir.join("model.ckpt"), &params)?;
    save_train_state(&dir.join("state.bin"), &params, &state)?;
    write_log(&dir.join("log.jsonl"), &state.history)?;
    Ok(params)
}

fn multi_view_examples(data: &Dataset) -> Vec<MultiViewExample> {
    data.split(Split::Train)
        .map(|(s, imgs)| MultiViewExample {
            view_set: data.manifest.view_set.clone(),
            images: imgs.iter().map(from_image).collect(),
            prompts: s.prompts.clone(),
        })
        .collect()
}

/// `train-fba`: trains the FBA and cross-attention blocks on top of the
/// frozen base checkpoint.
pub fn train_fba_stage(cfg: &ExperimentConfig, on_step: impl FnMut(usize, &LossRecord)) -> Result<DenoiserParams> {
    cfg.validate()?;
    let run = RunDir::new(cfg);
    let dir = run.fba();
    let (mut params, mut state) = match resume(&dir, cfg, Phase::Fba)? {
        Some(p) => p,
        None => {
            let params = load_model(&run.base(), cfg, "train-base")?;
            let state = TrainState::new(Phase::Fba, &params, cfg.seed);
            (params, state)
        }
    };
    let data = load_dataset(cfg)?;
    let examples = multi_view_examples(&data);
    let schedule = cfg.schedule()?;
    train_fba(
        &mut params,
        &examples,
        &schedule,
        &cfg.train_config(true),
        &cfg.run_settings(),
        &mut state,
        on_step,
    )?;
    write_stage_header(&dir, cfg)?;
    save_checkpoint(&dir.join("model.ckpt"), &params)?;
    save_train_state(&dir.join("state.bin"), &params, &state)?;
    write_log(&dir.join("log.jsonl"), &state.history)?;
    Ok(params)
}

/// Record of one set of generated views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub config_hash: String,
    pub label: String,
    pub method: NoiseMode,
    pub seed: u64,
    pub view_set: ViewSet,
    pub scene_ids: Vec<usize>,
}

fn eval_scenes(cfg: &ExperimentConfig, data: &DatasetManifest) -> Vec<SceneRecord> {
    let all: Vec<SceneRecord> = data.scenes.iter().filter(|s| s.split == Split::Eval).cloned().collect();
    let k = if cfg.sample.scenes == 0 { all.len() } else { cfg.sample.scenes.min(all.len()) };
    all.into_iter().take(k).collect()
}

/// Jointly samples every evaluation scene with the configured noise and
/// writes the views under `dir`.
pub fn sample_into(cfg: &ExperimentConfig, params: &DenoiserParams, dir: &Path, label: &str) -> Result<SampleManifest> {
    cfg.validate()?;
    check_architecture(params, cfg, dir, "train-fba")?;
    let manifest = load_manifest(cfg)?;
    let scenes = eval_scenes(cfg, &manifest);
    let vs = cfg.view_set()?;
    let schedule = cfg.schedule()?;
    let noise = cfg.noise_settings();
    let run = cfg.run_settings();
    scenes.par_iter().try_for_each(|s| -> Result<()> {
        let prompts = s.world.render(&vs).prompts;
        let bundle = sample_bundle(
            &vs,
            &schedule,
            3,
            cfg.noise.w,
            derive_seed(cfg.seed, domain::BUNDLE, s.id as u64, 0),
        )?;
        let opts = SampleOptions {
            seed: derive_seed(cfg.seed, domain::SAMPLE_STEP, s.id as u64, 0),
            recollect_g: cfg.sample.recollect_g,
        };
        let views = sample_multiview(params, &vs, &bundle, &noise, &schedule, Some(&prompts), &run, opts)?;
        views
            .iter()
            .enumerate()
            .try_for_each(|(v, img)| save_png(&view_png(dir, s.id, v), img))
    })?;
    let out = SampleManifest {
        config_hash: cfg.hash(),
        label: label.to_string(),
        method: cfg.noise.mode,
        seed: cfg.seed,
        view_set: vs,
        scene_ids: scenes.iter().map(|s| s.id).collect(),
    };
    write_stage_header(dir, cfg)?;
    write_json(&dir.join("manifest.json"), &out)?;
    Ok(out)
}

fn load_manifest(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let dir = RunDir::new(cfg).data();
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(missing("dataset", &dir, "gen-data"));
    }
    read_json(&path)
}

/// `sample`: generates the evaluation scenes with the trained model under
/// `samples/<noise mode>`.
pub fn sample_stage(cfg: &ExperimentConfig) -> Result<SampleManifest> {
    let run = RunDir::new(cfg);
    let params = load_model(&run.fba(), cfg, "train-fba")?;
    let label = cfg.noise.mode.name();
    sample_into(cfg, &params, &run.samples().join(label), label)
}

fn psnr_options(cfg: &ExperimentConfig) -> PsnrOptions {
    PsnrOptions {
        cap_db: cfg.eval.psnr_cap_db,
        include_wrap: cfg.eval.include_wrap,
    }
}

fn ground_truth(manifest: &DatasetManifest, id: usize, vs: &ViewSet) -> Result<Vec<Tensor>> {
    let s = manifest
        .scenes
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::Precondition(format!("scene {id} is not in the dataset; rerun `mvdiff gen-data`")))?;
    Ok(s.world.render(vs).images.iter().map(quantize).collect())
}

/// Scores one sample directory against ground-truth renders.
pub fn evaluate_samples(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<SceneReport>> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(missing("samples", dir, "sample"));
    }
    let sm: SampleManifest = read_json(&path)?;
    let data = load_manifest(cfg)?;
    let opts = psnr_options(cfg);
    sm.scene_ids
        .par_iter()
        .map(|&id| {
            let gt = ground_truth(&data, id, &sm.view_set)?;
            let generated = (0..sm.view_set.n_views)
                .map(|v| load_png(&view_png(dir, id, v)))
                .collect::<Result<Vec<_>>>()?;
            SceneReport::evaluate(id, &sm.label, &generated, &gt, &sm.view_set, &opts, &sm.config_hash)
        })
        .collect()
}

/// Scores ground-truth renders against themselves.
pub fn evaluate_ground_truth(cfg: &ExperimentConfig) -> Result<Vec<SceneReport>> {
    let data = load_manifest(cfg)?;
    let vs = cfg.view_set()?;
    let opts = psnr_options(cfg);
    let hash = cfg.hash();
    eval_scenes(cfg, &data)
        .par_iter()
        .map(|s| {
            let gt = ground_truth(&data, s.id, &vs)?;
            SceneReport::evaluate(s.id, GROUND_TRUTH, &gt, &gt, &vs, &opts, &hash)
        })
        .collect()
}

/// Mean and 95% half-width of a metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let (mean, ci95) = mean_ci95(values);
        Stat { mean, ci95 }
    }
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub scenes: usize,
    pub overlap_psnr: Stat,
    pub psnr_ratio: Stat,
    pub intra_distance: Stat,
    pub config_hash: String,
}

pub fn summarize(label: &str, reports: &[SceneReport], config_hash: &str) -> SummaryRow {
    let pick = |f: fn(&SceneReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
    SummaryRow {
        label: label.to_string(),
        scenes: reports.len(),
        overlap_psnr: pick(|r| r.overlap_psnr),
        psnr_ratio: pick(|r| r.psnr_ratio),
        intra_distance: pick(|r| r.intra_distance),
        config_hash: config_hash.to_string(),
    }
}

/// Markdown table with method × {overlap PSNR, ratio, intra proxy}.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from("| method | scenes | overlap PSNR (dB) | PSNR ratio | intra distance |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {:.3} ± {:.3} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
            r.label,
            r.scenes,
            r.overlap_psnr.mean,
            r.overlap_psnr.ci95,
            r.psnr_ratio.mean,
            r.psnr_ratio.ci95,
            r.intra_distance.mean,
            r.intra_distance.ci95
        ));
    }
    s
}

fn write_reports(dir: &Path, name: &str, reports: &[SceneReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text: String = reports.iter().map(|r| r.to_json_line() + "\n").collect();
    fs::write(dir.join(format!("{name}.jsonl")), text)?;
    Ok(())
}

fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    fs::write(dir.join("summary.md"), format_table(rows))?;
    let text: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect();
    fs::write(dir.join("summary.jsonl"), text)?;
    Ok(())
}

/// `eval`: scores ground truth and every sample set under `samples/`.
pub fn eval_stage(cfg: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let run = RunDir::new(cfg);
    let dir = run.eval();
    let mut labels: Vec<PathBuf> = match fs::read_dir(run.samples()) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").exists())
            .collect(),
        Err(_) => Vec::new(),
    };
    if labels.is_empty() {
        return Err(missing("samples", &run.samples(), "sample"));
    }
    labels.sort();
    write_stage_header(&dir, cfg)?;
    let hash = cfg.hash();
    let gt = evaluate_ground_truth(cfg)?;
    write_reports(&dir, GROUND_TRUTH, &gt)?;
    let mut rows = vec![summarize(GROUND_TRUTH, &gt, &hash)];
    for path in labels {
        let reports = evaluate_samples(cfg, &path)?;
        let sm: SampleManifest = read_json(&path.join("manifest.json"))?;
        write_reports(&dir, &sm.label, &reports)?;
        rows.push(summarize(&sm.label, &reports, &sm.config_hash));
    }
    write_summary(&dir, &rows)?;
    Ok(rows)
}

/// Config variants and labels of an ablation grid.
pub fn grid_variants(cfg: &ExperimentConfig, grid: Grid) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c
    };
    match grid {
        Grid::W => cfg
            .ablate
            .w_values
            .iter()
            .map(|&w| {
                (
                    format!("coordinate w={w}"),
                    with(&|c| {
                        c.noise.mode = NoiseMode::Coordinate;
                        c.noise.w = w;
                    }),
                )
            })
            .collect(),
        Grid::FilterKind => [
            FilterKind::BinaryHpf,
            FilterKind::GaussianHpf,
            FilterKind::BinaryLpf,
            FilterKind::None,
        ]
        .into_iter()
        .map(|k| (format!("{k:?}"), with(&|c| c.fba.filter_kind = k)))
        .collect(),
        Grid::FilterDirection => [FilterDirection::Rt, FilterDirection::OneMinusRt]
            .into_iter()
            .map(|d| (format!("{d:?}"), with(&|c| c.fba.filter_direction = d)))
            .collect(),
        Grid::Noise => NoiseMode::ALL
            .into_iter()
            .map(|m| (m.name().to_string(), with(&|c| c.noise.mode = m)))
            .collect(),
    }
}

/// `ablate`: samples and scores every variant of `grid` with the trained
/// FBA checkpoint.
pub fn ablate_stage(cfg: &ExperimentConfig, grid: Grid) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let run = RunDir::new(cfg);
    let params = load_model(&run.fba(), cfg, "train-fba")?;
    let dir = run.ablate(grid);
    write_stage_header(&dir, cfg)?;
    let mut rows = Vec::new();
    for (k, (label, variant)) in grid_variants(cfg, grid).into_iter().enumerate() {
        variant.validate()?;
        let sub = dir.join(format!("variant_{k:02}"));
        sample_into(&variant, &params, &sub, &label)?;
        let reports = evaluate_samples(&variant, &sub)?;
        write_reports(&sub, "reports", &reports)?;
        rows.push(summarize(&label, &reports, &variant.hash()));
    }
    write_summary(&dir, &rows)?;
    Ok(rows)
}
