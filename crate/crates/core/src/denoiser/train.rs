use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{collect_g_features, collect_noise_free_maps, forward_tape, Bound, ForwardCtx, NetGeometry, RunSettings};
use super::params::{DenoiserParams, Partition};
use crate::attention::xa_loss_tape;
use crate::autograd::{Tape, Var};
use crate::diffusion::{forward_sample, Schedule};
use crate::error::{Error, Result};
use crate::geometry::ViewSet;
use crate::noise_init::{coordinate_noise, sample_bundle};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// Optimizer and sampling settings for either training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Views per multi-view training sample.
    pub views_per_sample: usize,
    /// Weight of the cross-attention loss.
    pub lambda: f64,
    /// Coordinate weight of the noise that drives the guidance pass.
    pub w: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 8,
            lr: 2e-4,
            grad_clip: 1.0,
            views_per_sample: 4,
            lambda: 10.0,
            w: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Fba,
}

impl Phase {
    pub fn trainable(self) -> &'static [Partition] {
        match self {
            Phase::Base => &[Partition::Base],
            Phase::Fba => &[Partition::Fba, Partition::Xa],
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Phase::Base => 0,
            Phase::Fba => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Phase::Base),
            1 => Ok(Phase::Fba),
            _ => Err(Error::Format(format!("unknown phase code {c}"))),
        }
    }
}

/// Per-step losses. For the base stage `xa` is zero and `total == ldm`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub ldm: f64,
    pub xa: f64,
    pub total: f64,
}

/// Resumable optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    pub seed: u64,
    pub step: usize,
    /// Indices into the parameter list that this stage updates.
    pub trainable: Vec<usize>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(phase: Phase, params: &DenoiserParams, seed: u64) -> Self {
        let trainable: Vec<usize> = params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| phase.trainable().contains(&e.partition))
            .map(|(k, _)| k)
            .collect();
        let zeros = |k: &usize| Tensor::zeros(params.entries()[*k].value.shape());
        TrainState {
            phase,
            seed,
            step: 0,
            m: trainable.iter().map(zeros).collect(),
            v: trainable.iter().map(zeros).collect(),
            trainable,
            history: Vec::new(),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(params: &mut DenoiserParams, state: &mut TrainState, grads: &[Tensor], cfg: &TrainConfig) {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let step = (state.step + 1) as i32;
    let c1 = 1.0 - BETA1.powi(step);
    let c2 = 1.0 - BETA2.powi(step);
    for (slot, g) in grads.iter().enumerate() {
        let k = state.trainable[slot];
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let w = params.value_mut(k).data_mut();
        for (((wi, mi), vi), &gi) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            let gi = gi * clip;
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            *wi -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
        }
    }
}

fn collect_grads(tape: &Tape, root: Var, bound: &Bound, state: &TrainState) -> Vec<Tensor> {
    let mut grads = tape.backward(root);
    state
        .trainable
        .iter()
        .map(|&k| {
            let v = bound.vars[k];
            grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect()
}

fn check_finite(rec: &LossRecord, step: usize, grads: &[Tensor]) -> Result<()> {
    if !(rec.total.is_finite() && rec.ldm.is_finite() && rec.xa.is_finite()) {
        return Err(Error::Numerical(format!(
            "loss diverged at step {step}: ldm {}, xa {}, total {}",
            rec.ldm, rec.xa, rec.total
        )));
    }
    if let Some(k) = grads.iter().position(|g| !g.all_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at step {step} (slot {k})")));
    }
    Ok(())
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Single-view noise-prediction loss for one batch, on a fresh tape.
pub fn base_loss(
    params: &DenoiserParams,
    images: &[Tensor],
    schedule: &Schedule,
    cfg: &TrainConfig,
    seed: u64,
    step: usize,
    trainable: &[Partition],
) -> Result<(Tape, Bound, Var)> {
    if images.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut r = rng::stream(seed, domain::BASE_STEP, step as u64, 0);
    let run = RunSettings::base_only();
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape, trainable);
    let mut terms = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch.max(1) {
        let x0 = &images[r.random_range(0..images.len())];
        let t = r.random_range(1..=schedule.t_max);
        let eps = rng::randn(x0.shape(), &mut r);
        let zt = forward_sample(x0, t, &eps, schedule)?;
        let ctx = ForwardCtx {
            t,
            t_max: schedule.t_max,
            run: &run,
            geometry: None,
            prompts: None,
            g: None,
        };
        let z = tape.constant(zt);
        let out = forward_tape(params, &bound, &mut tape, &[z], &ctx)?;
        let target = tape.constant(eps);
        terms.push(tape.mse(out.eps[0], target));
    }
    let loss = mean_of(&mut tape, &terms);
    Ok((tape, bound, loss))
}

/// One base-stage step.
pub fn base_step(
    params: &mut DenoiserParams,
    images: &[Tensor],
    schedule: &Schedule,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<LossRecord> {
    if state.phase != Phase::Base {
        return Err(Error::Precondition("train state belongs to the FBA stage".into()));
    }
    let (tape, bound, loss) = base_loss(params, images, schedule, cfg, state.seed, state.step, Phase::Base.trainable())?;
    let l = tape.value(loss).item();
    let rec = LossRecord {
        ldm: l,
        xa: 0.0,
        total: l,
    };
    let grads = collect_grads(&tape, loss, &bound, state);
    check_finite(&rec, state.step, &grads)?;
    adam_update(params, state, &grads, cfg);
    state.step += 1;
    state.history.push(rec);
    Ok(rec)
}

/// Trains the base partition until `cfg.steps` steps have been taken.
pub fn train_base(
    params: &mut DenoiserParams,
    images: &[Tensor],
    schedule: &Schedule,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_step: impl FnMut(usize, &LossRecord),
) -> Result<()> {
    while state.step < cfg.steps {
        let rec = base_step(params, images, schedule, cfg, state)?;
        on_step(state.step, &rec);
    }
    Ok(())
}

/// One scene of multi-view training data, images in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct MultiViewExample {
    pub view_set: ViewSet,
    pub images: Vec<Tensor>,
    pub prompts: Vec<Vec<usize>>,
}

/// The randomly drawn ingredients of one FBA-stage step.
pub struct FbaBatch {
    pub geometry: NetGeometry,
    pub t: usize,
    pub z0: Vec<Tensor>,
    pub zt: Vec<Tensor>,
    pub eps: Vec<Tensor>,
    pub eps_hat: Vec<Tensor>,
    pub prompts: Vec<Vec<usize>>,
}

pub fn draw_fba_batch(
    params: &DenoiserParams,
    data: &[MultiViewExample],
    schedule: &Schedule,
    cfg: &TrainConfig,
    seed: u64,
    step: usize,
) -> Result<FbaBatch> {
    if data.is_empty() {
        return Err(Error::Precondition("multi-view training set is empty".into()));
    }
    let mut r = rng::stream(seed, domain::FBA_STEP, step as u64, 0);
    let ex = &data[r.random_range(0..data.len())];
    let n_all = ex.view_set.n_views;
    if ex.images.len() != n_all || ex.prompts.len() != n_all {
        return Err(Error::Precondition("scene is missing views, prompts or geometry".into()));
    }
    let n = cfg.views_per_sample.clamp(1, n_all);
    let start = r.random_range(0..n_all);
    let vs = ex.view_set.window(start, n)?;
    let pick = |k: usize| (start + k) % n_all;
    let z0: Vec<Tensor> = (0..n).map(|k| ex.images[pick(k)].clone()).collect();
    let prompts: Vec<Vec<usize>> = (0..n).map(|k| ex.prompts[pick(k)].clone()).collect();
    let t = r.random_range(1..=schedule.t_max);
    let bundle = sample_bundle(&vs, schedule, 3, cfg.w, r.random())?;
    let zt = z0
        .iter()
        .zip(&bundle.eps_view)
        .map(|(x, e)| forward_sample(x, t, e, schedule))
        .collect::<Result<Vec<_>>>()?;
    let eps_hat = (0..n).map(|i| coordinate_noise(&bundle, i)).collect::<Result<Vec<_>>>()?;
    Ok(FbaBatch {
        geometry: NetGeometry::build(params, &vs)?,
        t,
        z0,
        zt,
        eps: bundle.eps_view,
        eps_hat,
        prompts,
    })
}

/// Tape holding `L_LDM + lambda * L_XA` for one batch.
pub struct FbaLoss {
    pub tape: Tape,
    pub bound: Bound,
    pub ldm: Var,
    pub xa: Option<Var>,
    pub total: Var,
}

pub fn fba_loss(
    params: &DenoiserParams,
    batch: &FbaBatch,
    schedule: &Schedule,
    run: &RunSettings,
    lambda: f64,
    trainable: &[Partition],
) -> Result<FbaLoss> {
    let needs_g = run.fba_enabled && run.fba.non_overlap && !params.arch.fba_levels.is_empty();
    let g = if needs_g {
        Some(collect_g_features(params, &batch.eps_hat, &batch.eps, batch.t, schedule)?)
    } else {
        None
    };
    let use_xa = run.xa_enabled && !params.arch.xa_layers.is_empty();
    let maps0 = if use_xa {
        let g0 = if needs_g && run.maps0_with_fba {
            Some(collect_g_features(params, &batch.eps_hat, &batch.eps, 0, schedule)?)
        } else {
            None
        };
        collect_noise_free_maps(params, &batch.geometry, &batch.z0, &batch.prompts, run, schedule.t_max, g0.as_ref())?
    } else {
        Vec::new()
    };
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape, trainable);
    let ctx = ForwardCtx {
        t: batch.t,
        t_max: schedule.t_max,
        run,
        geometry: Some(&batch.geometry),
        prompts: Some(&batch.prompts),
        g: g.as_ref(),
    };
    let z: Vec<Var> = batch.zt.iter().map(|x| tape.constant(x.clone())).collect();
    let out = forward_tape(params, &bound, &mut tape, &z, &ctx)?;
    let terms: Vec<Var> = out
        .eps
        .iter()
        .zip(&batch.eps)
        .map(|(&p, e)| {
            let e = tape.constant(e.clone());
            tape.mse(p, e)
        })
        .collect();
    let ldm = mean_of(&mut tape, &terms);
    let xa = if use_xa {
        xa_loss_tape(&mut tape, &out.maps, &maps0)?
    } else {
        None
    };
    let total = match xa {
        Some(x) if lambda != 0.0 => {
            let weighted = tape.scale(x, lambda);
            tape.add(ldm, weighted)
        }
        _ => ldm,
    };
    Ok(FbaLoss {
        tape,
        bound,
        ldm,
        xa,
        total,
    })
}

/// One FBA-stage step; the base partition is never written.
pub fn fba_step(
    params: &mut DenoiserParams,
    data: &[MultiViewExample],
    schedule: &Schedule,
    cfg: &TrainConfig,
    run: &RunSettings,
    state: &mut TrainState,
) -> Result<LossRecord> {
    if state.phase != Phase::Fba {
        return Err(Error::Precondition("train state belongs to the base stage".into()));
    }
    let batch = draw_fba_batch(params, data, schedule, cfg, state.seed, state.step)?;
    let loss = fba_loss(params, &batch, schedule, run, cfg.lambda, Phase::Fba.trainable())?;
    let tape = &loss.tape;
    let rec = LossRecord {
        ldm: tape.value(loss.ldm).item(),
        xa: loss.xa.map_or(0.0, |x| tape.value(x).item()),
        total: tape.value(loss.total).item(),
    };
    let grads = collect_grads(tape, loss.total, &loss.bound, state);
    check_finite(&rec, state.step, &grads)?;
    adam_update(params, state, &grads, cfg);
    state.step += 1;
    state.history.push(rec);
    Ok(rec)
}

/// Trains the FBA and cross-attention partitions.
pub fn train_fba(
    params: &mut DenoiserParams,
    data: &[MultiViewExample],
    schedule: &Schedule,
    cfg: &TrainConfig,
    run: &RunSettings,
    state: &mut TrainState,
    mut on_step: impl FnMut(usize, &LossRecord),
) -> Result<()> {
    while state.step < cfg.steps {
        let rec = fba_step(params, data, schedule, cfg, run, state)?;
        on_step(state.step, &rec);
    }
    Ok(())
}
