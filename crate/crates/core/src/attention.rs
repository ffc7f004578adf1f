//! Fourier-based attention across views and prompt cross-attention.
//!
//! Each FBA block lets view `i` attend to every other view. Inside the
//! overlap with view `j` the keys are the correspondence-warped features of
//! `j` plus an encoding of the displacement; outside it they are the
//! spectrally filtered features of a parallel pass driven by coordinate
//! noise. A zero-initialized 1x1 convolution adds the result back onto the
//! block input, so a fresh block is an exact identity.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Taps, Var};
use crate::error::{Error, Result};
use crate::frequency::{filter_features_with_direction, FilterDirection, FilterKind, ScalarEncoding};
use crate::geometry::{correspondence, correspondence_at, overlap_mask, warp_features, Correspondence, ViewSet};
use crate::rng;
use crate::tensor::Tensor;

/// Weights of one FBA block.
#[derive(Clone, Debug, PartialEq)]
pub struct FbaBlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Projects the displacement encoding `[4 * pe_bands]` to channels.
    pub pe_proj: Tensor,
    pub pe_bands: usize,
    /// 1x1 residual convolution `[C, C, 1, 1]` and bias `[C]`.
    pub resid_w: Tensor,
    pub resid_b: Tensor,
    pub trainable: bool,
}

impl FbaBlockParams {
    pub fn new(channels: usize, pe_bands: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        let pe_std = (1.0 / (4 * pe_bands).max(1) as f64).sqrt();
        FbaBlockParams {
            wq: rng::randn(&[channels, channels], rng).scale(std),
            wk: rng::randn(&[channels, channels], rng).scale(std),
            wv: rng::randn(&[channels, channels], rng).scale(std),
            pe_proj: rng::randn(&[channels, 4 * pe_bands], rng).scale(pe_std),
            pe_bands,
            resid_w: Tensor::zeros(&[channels, channels, 1, 1]),
            resid_b: Tensor::zeros(&[channels]),
            trainable: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    /// Puts the weights on a tape, as parameters when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> FbaVars {
        let mut leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        FbaVars {
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            pe_proj: leaf(&self.pe_proj),
            resid_w: leaf(&self.resid_w),
            resid_b: leaf(&self.resid_b),
        }
    }
}

/// Tape handles for an FBA block.
#[derive(Clone, Copy, Debug)]
pub struct FbaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub pe_proj: Var,
    pub resid_w: Var,
    pub resid_b: Var,
}

/// Behaviour switches shared by every FBA block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbaSettings {
    pub filter_kind: FilterKind,
    pub filter_direction: FilterDirection,
    /// Add the sinusoidal encoding of `1 - r_t` to the filtered features.
    pub radius_encoding: bool,
    /// Divide attention logits by `sqrt(C)`.
    pub scaled: bool,
    /// Fuse filtered guidance features outside the overlap. Without it the
    /// blocks attend to overlapping positions only.
    pub non_overlap: bool,
}

impl Default for FbaSettings {
    fn default() -> Self {
        FbaSettings {
            filter_kind: FilterKind::BinaryHpf,
            filter_direction: FilterDirection::Rt,
            radius_encoding: true,
            scaled: true,
            non_overlap: true,
        }
    }
}

/// Sin/cos encoding of both displacement components at `bands` octaves,
/// shape `[4 * bands, hw]`.
pub fn displacement_encoding(disp: &[[f64; 2]], bands: usize) -> Tensor {
    let n = disp.len();
    let mut data = vec![0.0; 4 * bands * n];
    for (p, d) in disp.iter().enumerate() {
        for (comp, &v) in d.iter().enumerate() {
            for k in 0..bands {
                let a = std::f64::consts::PI * (1u64 << k) as f64 * v;
                let row = (comp * bands + k) * 2;
                data[row * n + p] = a.sin();
                data[(row + 1) * n + p] = a.cos();
            }
        }
    }
    Tensor::from_vec(&[4 * bands, n], data).unwrap()
}

/// `warp(F_j) + gamma(u* - u)`: the overlap target of view `j` as seen from
/// the source view of `corr`.
pub fn caa_target(f_j: &Tensor, corr: &Correspondence, pe_proj: &Tensor, pe_bands: usize) -> Result<Tensor> {
    let (c, h, w) = f_j.chw()?;
    if pe_proj.shape() != [c, 4 * pe_bands] {
        return Err(Error::shape(format!("pe_proj {:?} for {c} channels", pe_proj.shape())));
    }
    let warped = warp_features(f_j, corr)?;
    let enc = displacement_encoding(&corr.displacement(), pe_bands);
    let gamma = crate::autograd::matmul(pe_proj, &enc, false, false).reshape(&[c, h, w])?;
    warped.add(&gamma)
}

/// `M * F_bar + (1 - M) * G_bar` with `mask: [H*W]` broadcast over channels.
pub fn combine_targets(f_bar: &Tensor, g_bar: &Tensor, mask: &[f64]) -> Result<Tensor> {
    f_bar.ensure_same_shape(g_bar, "combine_targets")?;
    let (_, h, w) = f_bar.chw()?;
    if mask.len() != h * w {
        return Err(Error::shape(format!("mask of {} cells for {h}x{w}", mask.len())));
    }
    let plane = h * w;
    let data = f_bar
        .data()
        .iter()
        .zip(g_bar.data())
        .enumerate()
        .map(|(k, (f, g))| {
            let m = mask[k % plane];
            m * f + (1.0 - m) * g
        })
        .collect();
    Tensor::from_vec(f_bar.shape(), data)
}

/// Single-head attention of flattened queries `f: [C, Nq]` over `v: [C, Nk]`,
/// returning `(output [C, Nq], weights [Nq, Nk])`.
pub fn attention_tape(tape: &mut Tape, f: Var, v: Var, wq: Var, wk: Var, wv: Var, scaled: bool) -> (Var, Var) {
    let c = tape.shape(f)[0];
    let q = tape.matmul(wq, f);
    let k = tape.matmul(wk, v);
    let val = tape.matmul(wv, v);
    let mut logits = tape.matmul_t(q, k, true, false);
    if scaled {
        logits = tape.scale(logits, 1.0 / (c as f64).sqrt());
    }
    let weights = tape.softmax_rows(logits);
    (tape.matmul_t(val, weights, false, true), weights)
}

/// `softmax((Wq F)^T (Wk V) / sqrt(C)) (Wv V)^T` reshaped to the layout of
/// `f_i`. `targets: [C, Nk]`; with no keys the input passes through.
pub fn fba_attention(f_i: &Tensor, targets: &Tensor, p: &FbaBlockParams, scaled: bool) -> Result<Tensor> {
    let (c, h, w) = f_i.chw()?;
    if targets.rank() != 2 || targets.shape()[0] != c {
        return Err(Error::shape(format!("targets {:?} for {c} channels", targets.shape())));
    }
    if targets.shape()[1] == 0 {
        return Ok(f_i.clone());
    }
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let f = tape.constant(f_i.clone().reshape(&[c, h * w])?);
    let v = tape.constant(targets.clone());
    let (out, _) = attention_tape(&mut tape, f, v, vars.wq, vars.wk, vars.wv, scaled);
    tape.value(out).clone().reshape(&[c, h, w])
}

/// Precomputed geometry of one ordered view pair at a feature resolution.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    pub target: usize,
    taps: Option<Arc<Vec<Taps>>>,
    mask: Arc<Vec<f64>>,
    overlap_cols: Arc<Vec<usize>>,
    encoding: Tensor,
}

impl PairGeometry {
    /// `corr` maps source pixels into view `target` at feature resolution;
    /// `mask` is the overlap mask on the same grid.
    pub fn new(target: usize, corr: &Correspondence, mask: Vec<f64>, pe_bands: usize) -> Result<Self> {
        if mask.len() != corr.height * corr.width {
            return Err(Error::shape("overlap mask and correspondence grids differ"));
        }
        let overlap_cols = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.5)
            .map(|(k, _)| k)
            .collect();
        Ok(PairGeometry {
            target,
            taps: (!corr.is_identity()).then(|| Arc::new(corr.bilinear_taps())),
            mask: Arc::new(mask),
            overlap_cols: Arc::new(overlap_cols),
            encoding: displacement_encoding(&corr.displacement(), pe_bands),
        })
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }
}

/// Pair geometry for every ordered pair of a view set at one resolution.
#[derive(Clone, Debug)]
pub struct LevelGeometry {
    pub height: usize,
    pub width: usize,
    /// `pairs[i]` lists the targets of view `i`.
    pub pairs: Vec<Vec<PairGeometry>>,
}

impl LevelGeometry {
    pub fn build(vs: &ViewSet, height: usize, width: usize, pe_bands: usize) -> Result<Self> {
        let mut pairs = Vec::with_capacity(vs.n_views);
        for i in 0..vs.n_views {
            let mut row = Vec::with_capacity(vs.n_views.saturating_sub(1));
            for j in (0..vs.n_views).filter(|&j| j != i) {
                let mask = overlap_mask(&correspondence(vs, i, j)?, height, width)?.mask;
                let corr = correspondence_at(vs, i, j, height, width)?;
                row.push(PairGeometry::new(j, &corr, mask, pe_bands)?);
            }
            pairs.push(row);
        }
        Ok(LevelGeometry { height, width, pairs })
    }

    pub fn n_views(&self) -> usize {
        self.pairs.len()
    }
}

/// Filtered guidance features `G_bar` for every view.
pub fn filter_guidance(g: &[Tensor], t: usize, t_max: usize, s: &FbaSettings) -> Result<Vec<Tensor>> {
    let pe = if s.radius_encoding {
        ScalarEncoding::Sinusoidal
    } else {
        ScalarEncoding::Off
    };
    g.iter()
        .map(|g| filter_features_with_direction(g, t, t_max, s.filter_kind, s.filter_direction, pe))
        .collect()
}

/// One FBA block on a tape. `g_bar` holds the filtered guidance features
/// when non-overlap fusion is active.
pub fn fba_block_tape(
    tape: &mut Tape,
    feats: &[Var],
    g_bar: Option<&[Tensor]>,
    geo: &LevelGeometry,
    vars: &FbaVars,
    s: &FbaSettings,
) -> Result<Vec<Var>> {
    let n = feats.len();
    if geo.n_views() != n {
        return Err(Error::shape(format!("geometry for {} views, got {n}", geo.n_views())));
    }
    if s.non_overlap && g_bar.is_none() && n > 1 {
        return Err(Error::Precondition(
            "non-overlap fusion needs guidance features from the coordinate-noise pass".into(),
        ));
    }
    let (c, h, w) = {
        let sh = tape.shape(feats[0]);
        if sh.len() != 3 {
            return Err(Error::shape(format!("features {sh:?} are not [C,H,W]")));
        }
        (sh[0], sh[1], sh[2])
    };
    if (h, w) != (geo.height, geo.width) {
        return Err(Error::shape(format!(
            "features {h}x{w} vs geometry {}x{}",
            geo.height, geo.width
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n);
    for (i, &fi) in feats.iter().enumerate() {
        let mut cols = Vec::new();
        for pair in &geo.pairs[i] {
            let fj = feats[pair.target];
            let warped = match &pair.taps {
                Some(taps) => tape.resample(fj, taps.clone(), (h, w)),
                None => fj,
            };
            let warped = tape.reshape(warped, &[c, hw]);
            let enc = tape.constant(pair.encoding.clone());
            let gamma = tape.matmul(vars.pe_proj, enc);
            let f_bar = tape.add(warped, gamma);
            match g_bar {
                Some(g) => {
                    let inside = tape.mul_spatial(f_bar, pair.mask.clone());
                    let gj = &g[pair.target];
                    let plane: Vec<f64> = gj
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, v)| (1.0 - pair.mask[k % hw]) * v)
                        .collect();
                    let outside = tape.constant(Tensor::from_vec(&[c, hw], plane)?);
                    cols.push(tape.add(inside, outside));
                }
                None => {
                    if !pair.overlap_cols.is_empty() {
                        cols.push(tape.select_cols(f_bar, pair.overlap_cols.clone()));
                    }
                }
            }
        }
        if cols.is_empty() {
            out.push(fi);
            continue;
        }
        let v = if cols.len() == 1 { cols[0] } else { tape.concat_cols(&cols) };
        let f_flat = tape.reshape(fi, &[c, hw]);
        let (attn, _) = attention_tape(tape, f_flat, v, vars.wq, vars.wk, vars.wv, s.scaled);
        let attn = tape.reshape(attn, &[c, h, w]);
        let resid = tape.conv2d(attn, vars.resid_w, Some(vars.resid_b));
        out.push(tape.add(fi, resid));
    }
    Ok(out)
}

/// Applies an FBA block to plain tensors. `g` are the unfiltered guidance
/// features at timestep `t`.
pub fn fba_block(
    feats: &[Tensor],
    g: Option<&[Tensor]>,
    t: usize,
    t_max: usize,
    geo: &LevelGeometry,
    p: &FbaBlockParams,
    s: &FbaSettings,
) -> Result<Vec<Tensor>> {
    let g_bar = g.map(|g| filter_guidance(g, t, t_max, s)).transpose()?;
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let vs: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    let out = fba_block_tape(&mut tape, &vs, g_bar.as_deref(), geo, &vars, s)?;
    Ok(out.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Row-stochastic attention weights recorded at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// `[query positions, key positions]`.
    pub weights: Tensor,
    pub layer_id: String,
}

/// Prompt cross-attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct XaParams {
    /// `[Dk, C]`
    pub wq: Tensor,
    /// `[Dk, D]`
    pub wk: Tensor,
    /// `[C, D]`
    pub wv: Tensor,
    /// Zero-initialized output projection `[C, C, 1, 1]` and bias `[C]`.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl XaParams {
    pub fn new(channels: usize, token_dim: usize, key_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        XaParams {
            wq: rng::randn(&[key_dim, channels], rng).scale((1.0 / channels as f64).sqrt()),
            wk: rng::randn(&[key_dim, token_dim], rng).scale((1.0 / token_dim as f64).sqrt()),
            wv: rng::randn(&[channels, token_dim], rng).scale((1.0 / token_dim as f64).sqrt()),
            out_w: Tensor::zeros(&[channels, channels, 1, 1]),
            out_b: Tensor::zeros(&[channels]),
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> XaVars {
        let mut leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        XaVars {
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            out_w: leaf(&self.out_w),
            out_b: leaf(&self.out_b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct XaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Cross-attention from the spatial features of all views (queries) to the
/// prompt tokens `[D, n_tokens]` (keys). Returns the per-view outputs with
/// the residual applied and the `[n * H * W, n_tokens]` map.
pub fn xa_tape(tape: &mut Tape, feats: &[Var], tokens: Var, vars: &XaVars, hw: (usize, usize)) -> Result<(Vec<Var>, Var)> {
    let shape = tape.shape(feats[0]).to_vec();
    if shape.len() != 3 || (shape[1], shape[2]) != hw {
        return Err(Error::shape(format!(
            "cross-attention is defined at {}x{}, got {shape:?}",
            hw.0, hw.1
        )));
    }
    let (c, plane) = (shape[0], hw.0 * hw.1);
    let flat: Vec<Var> = feats.iter().map(|&f| tape.reshape(f, &[c, plane])).collect();
    let all = if flat.len() == 1 { flat[0] } else { tape.concat_cols(&flat) };
    let q = tape.matmul(vars.wq, all);
    let k = tape.matmul(vars.wk, tokens);
    let v = tape.matmul(vars.wv, tokens);
    let dk = tape.shape(q)[0];
    let logits = tape.matmul_t(q, k, true, false);
    let logits = tape.scale(logits, 1.0 / (dk as f64).sqrt());
    let map = tape.softmax_rows(logits);
    let attended = tape.matmul_t(v, map, false, true);
    let mut out = Vec::with_capacity(feats.len());
    for (i, &f) in feats.iter().enumerate() {
        let cols = Arc::new((i * plane..(i + 1) * plane).collect());
        let part = tape.select_cols(attended, cols);
        let part = tape.reshape(part, &[c, hw.0, hw.1]);
        let proj = tape.conv2d(part, vars.out_w, Some(vars.out_b));
        out.push(tape.add(f, proj));
    }
    Ok((out, map))
}

/// Cross-attention map of plain tensors.
pub fn xa_maps(features: &[Tensor], tokens: &Tensor, p: &XaParams, hw: (usize, usize), layer_id: &str) -> Result<AttentionMap> {
    if features.is_empty() {
        return Err(Error::shape("no features"));
    }
    if tokens.rank() != 2 || tokens.shape()[0] != p.wk.shape()[1] || tokens.shape()[1] == 0 {
        return Err(Error::shape(format!("prompt tokens {:?}", tokens.shape())));
    }
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let fs: Vec<Var> = features.iter().map(|f| tape.constant(f.clone())).collect();
    let tk = tape.constant(tokens.clone());
    let (_, map) = xa_tape(&mut tape, &fs, tk, &vars, hw)?;
    Ok(AttentionMap {
        weights: tape.value(map).clone(),
        layer_id: layer_id.to_string(),
    })
}

/// `sum_l rms(M_t^l - M_0^l)`.
pub fn xa_loss(maps_t: &[AttentionMap], maps_0: &[AttentionMap]) -> Result<f64> {
    if maps_t.len() != maps_0.len() {
        return Err(Error::shape(format!("{} vs {} layers", maps_t.len(), maps_0.len())));
    }
    let mut total = 0.0;
    for (a, b) in maps_t.iter().zip(maps_0) {
        if a.layer_id != b.layer_id {
            return Err(Error::shape(format!("layer {} vs {}", a.layer_id, b.layer_id)));
        }
        let d = a.weights.sub(&b.weights)?;
        total += (d.sum_sq() / d.len() as f64).sqrt();
    }
    Ok(total)
}

/// Tape form of [`xa_loss`] with constant reference maps.
pub fn xa_loss_tape(tape: &mut Tape, maps_t: &[(String, Var)], maps_0: &[AttentionMap]) -> Result<Option<Var>> {
    if maps_t.len() != maps_0.len() {
        return Err(Error::shape(format!("{} vs {} layers", maps_t.len(), maps_0.len())));
    }
    let mut total: Option<Var> = None;
    for ((id, m), r) in maps_t.iter().zip(maps_0) {
        if *id != r.layer_id || tape.shape(*m) != r.weights.shape() {
            return Err(Error::shape(format!("map {id} does not match reference {}", r.layer_id)));
        }
        let reference = tape.constant(r.weights.clone());
        let d = tape.sub(*m, reference);
        let l = tape.rms(d);
        total = Some(match total {
            Some(acc) => tape.add(acc, l),
            None => l,
        });
    }
    Ok(total)
}

pub use crate::denoiser::collect_noise_free_maps;
