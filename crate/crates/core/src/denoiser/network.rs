use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{groups, DenoiserParams, Level, Partition, XaLayer};
use crate::attention::{
    fba_block_tape, filter_guidance, xa_tape, AttentionMap, FbaSettings, FbaVars, LevelGeometry, XaVars,
};
use crate::autograd::{Tape, Var};
use crate::diffusion::Schedule;
use crate::error::{Error, Result};
use crate::frequency::sinusoidal_embedding;
use crate::geometry::ViewSet;
use crate::tensor::Tensor;

/// Switches that change the forward pass without changing parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub fba_enabled: bool,
    pub fba: FbaSettings,
    pub xa_enabled: bool,
    /// Run the noise-free reference pass with FBA blocks active.
    pub maps0_with_fba: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            fba_enabled: true,
            fba: FbaSettings::default(),
            xa_enabled: true,
            maps0_with_fba: true,
        }
    }
}

impl RunSettings {
    /// Plain single-view denoiser: no cross-view or prompt blocks.
    pub fn base_only() -> Self {
        RunSettings {
            fba_enabled: false,
            xa_enabled: false,
            ..RunSettings::default()
        }
    }
}

/// Pair geometry for each FBA level of a view set.
#[derive(Clone, Debug)]
pub struct NetGeometry {
    pub n_views: usize,
    pub levels: Vec<(Level, LevelGeometry)>,
}

impl NetGeometry {
    pub fn build(params: &DenoiserParams, vs: &ViewSet) -> Result<Self> {
        let arch = &params.arch;
        if vs.height != arch.image_size || vs.width != arch.image_size {
            return Err(Error::shape(format!(
                "view set is {}x{}, denoiser expects {}x{}",
                vs.height, vs.width, arch.image_size, arch.image_size
            )));
        }
        let levels = arch
            .fba_levels
            .iter()
            .map(|&l| {
                let s = arch.level_size(l);
                Ok((l, LevelGeometry::build(vs, s, s, arch.pe_bands)?))
            })
            .collect::<Result<_>>()?;
        Ok(NetGeometry {
            n_views: vs.n_views,
            levels,
        })
    }

    fn level(&self, l: Level) -> Option<&LevelGeometry> {
        self.levels.iter().find(|(k, _)| *k == l).map(|(_, g)| g)
    }
}

/// Pre-FBA features of the coordinate-noise pass, per level and view.
#[derive(Clone, Debug, PartialEq)]
pub struct GFeatures {
    pub t: usize,
    pub levels: Vec<(Level, Vec<Tensor>)>,
}

impl GFeatures {
    pub fn level(&self, l: Level) -> Option<&[Tensor]> {
        self.levels.iter().find(|(k, _)| *k == l).map(|(_, v)| v.as_slice())
    }
}

/// Everything a forward pass needs besides parameters and inputs.
#[derive(Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub t: usize,
    pub t_max: usize,
    pub run: &'a RunSettings,
    pub geometry: Option<&'a NetGeometry>,
    /// Prompt attribute ids per view.
    pub prompts: Option<&'a [Vec<usize>]>,
    pub g: Option<&'a GFeatures>,
}

/// Parameters placed on a tape, aligned with [`DenoiserParams::entries`].
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn new(params: &DenoiserParams, tape: &mut Tape, trainable: &[Partition]) -> Self {
        let vars = params
            .entries()
            .iter()
            .map(|e| {
                if trainable.contains(&e.partition) {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn var(&self, params: &DenoiserParams, name: &str) -> Var {
        self.vars[params.position(name).unwrap_or_else(|| panic!("parameter {name} is registered"))]
    }
}

pub struct ForwardOut {
    pub eps: Vec<Var>,
    pub maps: Vec<(String, Var)>,
}

enum Mode {
    Full,
    /// Bypass FBA, record the features each block would receive and stop
    /// after the last such level.
    Collect,
}

struct Net<'a> {
    p: &'a DenoiserParams,
    b: &'a Bound,
}

impl Net<'_> {
    fn v(&self, name: &str) -> Var {
        self.b.var(self.p, name)
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str) -> Var {
        let w = self.v(&format!("{name}.w"));
        let b = self.v(&format!("{name}.b"));
        tape.conv2d(x, w, Some(b))
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Var {
        let w = self.v(&format!("{name}.w"));
        let b = self.v(&format!("{name}.b"));
        let y = tape.matmul(w, x);
        let n = tape.shape(y)[0];
        let y = tape.reshape(y, &[n]);
        tape.add(y, b)
    }

    fn time_embedding(&self, tape: &mut Tape, t: usize) -> Var {
        let td = self.p.arch.time_dim;
        let e = tape.constant(Tensor::from_vec(&[td, 1], sinusoidal_embedding(t as f64, td)).unwrap());
        let h = self.linear(tape, e, "time.l1");
        let h = tape.silu(h);
        let h = tape.reshape(h, &[td, 1]);
        let h = self.linear(tape, h, "time.l2");
        let h = tape.silu(h);
        tape.reshape(h, &[td, 1])
    }

    fn time_bias(&self, tape: &mut Tape, temb: Var, name: &str) -> Var {
        self.linear(tape, temb, &format!("{name}.temb"))
    }

    fn resblock(&self, tape: &mut Tape, x: Var, bias: Var, name: &str) -> Var {
        let ci = tape.shape(x)[0];
        let h = tape.group_norm(x, groups(ci));
        let h = tape.silu(h);
        let h = self.conv(tape, h, &format!("{name}.conv1"));
        let h = tape.add_channel(h, bias);
        let co = tape.shape(h)[0];
        let h = tape.group_norm(h, groups(co));
        let h = tape.silu(h);
        let h = self.conv(tape, h, &format!("{name}.conv2"));
        let skip = match self.p.position(&format!("{name}.skip.w")) {
            Some(k) => tape.conv2d(x, self.b.vars[k], None),
            None => x,
        };
        tape.add(skip, h)
    }

    fn fba_vars(&self, level: Level) -> FbaVars {
        let n = level.name();
        FbaVars {
            wq: self.v(&format!("fba.{n}.wq")),
            wk: self.v(&format!("fba.{n}.wk")),
            wv: self.v(&format!("fba.{n}.wv")),
            pe_proj: self.v(&format!("fba.{n}.pe_proj")),
            resid_w: self.v(&format!("fba.{n}.resid_w")),
            resid_b: self.v(&format!("fba.{n}.resid_b")),
        }
    }

    fn xa_vars(&self, layer: XaLayer) -> XaVars {
        let n = layer.name();
        XaVars {
            wq: self.v(&format!("xa.{n}.wq")),
            wk: self.v(&format!("xa.{n}.wk")),
            wv: self.v(&format!("xa.{n}.wv")),
            out_w: self.v(&format!("xa.{n}.out_w")),
            out_b: self.v(&format!("xa.{n}.out_b")),
        }
    }

    fn fba(&self, tape: &mut Tape, feats: Vec<Var>, level: Level, ctx: &ForwardCtx) -> Result<Vec<Var>> {
        if !ctx.run.fba_enabled || !self.p.arch.has_fba(level) {
            return Ok(feats);
        }
        let geo = ctx
            .geometry
            .and_then(|g| g.level(level))
            .ok_or_else(|| Error::Precondition(format!("FBA at {} needs view geometry", level.name())))?;
        let g_bar = if ctx.run.fba.non_overlap {
            match ctx.g.and_then(|g| g.level(level)) {
                Some(g) => Some(filter_guidance(g, ctx.t, ctx.t_max, &ctx.run.fba)?),
                None if feats.len() > 1 => {
                    return Err(Error::Precondition(format!(
                        "FBA at {} needs guidance features for non-overlap fusion",
                        level.name()
                    )))
                }
                None => None,
            }
        } else {
            None
        };
        fba_block_tape(tape, &feats, g_bar.as_deref(), geo, &self.fba_vars(level), &ctx.run.fba)
    }

    fn xa(
        &self,
        tape: &mut Tape,
        feats: Vec<Var>,
        layer: XaLayer,
        ctx: &ForwardCtx,
        maps: &mut Vec<(String, Var)>,
    ) -> Result<Vec<Var>> {
        if !ctx.run.xa_enabled || !self.p.arch.xa_layers.contains(&layer) {
            return Ok(feats);
        }
        let prompts = ctx
            .prompts
            .ok_or_else(|| Error::Precondition("cross-attention needs prompts".into()))?;
        if prompts.len() != feats.len() {
            return Err(Error::shape(format!("{} prompts for {} views", prompts.len(), feats.len())));
        }
        let ids: Vec<usize> = prompts.iter().flatten().copied().collect();
        if ids.is_empty() {
            return Err(Error::Precondition("prompts are empty".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&k| k >= self.p.arch.vocab) {
            return Err(Error::Index(format!("prompt id {bad} outside vocabulary of {}", self.p.arch.vocab)));
        }
        let table = self.v("xa.tokens");
        let tokens = tape.select_cols(table, Arc::new(ids));
        let s = self.p.arch.image_size / 2;
        let (out, map) = xa_tape(tape, &feats, tokens, &self.xa_vars(layer), (s, s))?;
        maps.push((layer.name().to_string(), map));
        Ok(out)
    }

    fn run(&self, tape: &mut Tape, z: &[Var], ctx: &ForwardCtx, mode: Mode) -> Result<(ForwardOut, Vec<(Level, Vec<Var>)>)> {
        let arch = &self.p.arch;
        let n = z.len();
        if n == 0 {
            return Err(Error::shape("no views"));
        }
        for &zi in z {
            if tape.shape(zi) != [3, arch.image_size, arch.image_size] {
                return Err(Error::shape(format!(
                    "input {:?}, expected [3, {s}, {s}]",
                    tape.shape(zi),
                    s = arch.image_size
                )));
            }
        }
        if let Some(g) = ctx.geometry {
            if g.n_views != n {
                return Err(Error::shape(format!("geometry for {} views, got {n}", g.n_views)));
            }
        }
        let collect = matches!(mode, Mode::Collect);
        let last_level = arch.fba_levels.iter().max().copied();
        let mut cache = Vec::new();
        let mut maps = Vec::new();

        let temb = self.time_embedding(tape, ctx.t);
        let bias = |tape: &mut Tape, name: &str| self.time_bias(tape, temb, name);
        let b1 = bias(tape, "rb1");
        let mut h: Vec<Var> = z
            .iter()
            .map(|&zi| {
                let x = self.conv(tape, zi, "in");
                self.resblock(tape, x, b1, "rb1")
            })
            .collect();
        if collect {
            if arch.has_fba(Level::Level1) {
                cache.push((Level::Level1, h.clone()));
            }
            if last_level == Some(Level::Level1) {
                return Ok((ForwardOut { eps: vec![], maps }, cache));
            }
        } else {
            h = self.fba(tape, h, Level::Level1, ctx)?;
        }
        let skips = h.clone();

        let b2 = bias(tape, "rb2");
        h = h
            .iter()
            .map(|&x| {
                let x = tape.avg_pool2(x);
                let x = self.conv(tape, x, "down");
                self.resblock(tape, x, b2, "rb2")
            })
            .collect();
        if collect {
            if arch.has_fba(Level::Level2) {
                cache.push((Level::Level2, h.clone()));
            }
            return Ok((ForwardOut { eps: vec![], maps }, cache));
        }
        h = self.fba(tape, h, Level::Level2, ctx)?;
        h = self.xa(tape, h, XaLayer::Down2, ctx, &mut maps)?;

        let bm = bias(tape, "mid");
        h = h.iter().map(|&x| self.resblock(tape, x, bm, "mid")).collect();
        h = self.xa(tape, h, XaLayer::Mid, ctx, &mut maps)?;

        let bu = bias(tape, "rb_up");
        let eps = h
            .iter()
            .zip(&skips)
            .map(|(&x, &s)| {
                let x = tape.upsample2(x);
                let x = tape.concat0(&[x, s]);
                let x = self.conv(tape, x, "up");
                let x = self.resblock(tape, x, bu, "rb_up");
                let c = tape.shape(x)[0];
                let x = tape.group_norm(x, groups(c));
                let x = tape.silu(x);
                self.conv(tape, x, "out")
            })
            .collect();
        Ok((ForwardOut { eps, maps }, cache))
    }
}

/// Forward pass on a tape with previously bound parameters.
pub fn forward_tape(params: &DenoiserParams, bound: &Bound, tape: &mut Tape, z: &[Var], ctx: &ForwardCtx) -> Result<ForwardOut> {
    Net { p: params, b: bound }.run(tape, z, ctx, Mode::Full).map(|(o, _)| o)
}

/// Noise prediction for every view plus the recorded cross-attention maps.
pub fn forward(params: &DenoiserParams, z: &[Tensor], ctx: &ForwardCtx) -> Result<(Vec<Tensor>, Vec<AttentionMap>)> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape, &[]);
    let zs: Vec<Var> = z.iter().map(|zi| tape.constant(zi.clone())).collect();
    let out = forward_tape(params, &bound, &mut tape, &zs, ctx)?;
    let eps = out.eps.iter().map(|&v| tape.value(v).clone()).collect();
    let maps = out
        .maps
        .iter()
        .map(|(id, v)| AttentionMap {
            weights: tape.value(*v).clone(),
            layer_id: id.clone(),
        })
        .collect();
    Ok((eps, maps))
}

/// Runs the FBA-free pass on `sqrt(abar_t) eps_hat^i + sqrt(1 - abar_t) eps^i`
/// and caches the input of every FBA block.
pub fn collect_g_features(
    params: &DenoiserParams,
    eps_hat: &[Tensor],
    eps_view: &[Tensor],
    t: usize,
    schedule: &Schedule,
) -> Result<GFeatures> {
    if t > schedule.t_max {
        return Err(Error::Index(format!("timestep {t} outside [0, {}]", schedule.t_max)));
    }
    if eps_hat.len() != eps_view.len() {
        return Err(Error::shape("guidance and view noise counts differ"));
    }
    let ab = schedule.alpha_bar[t];
    let z = eps_hat
        .iter()
        .zip(eps_view)
        .map(|(h, e)| h.lincomb(ab.sqrt(), e, (1.0 - ab).sqrt()))
        .collect::<Result<Vec<_>>>()?;
    if params.arch.fba_levels.is_empty() {
        return Ok(GFeatures { t, levels: vec![] });
    }
    let run = RunSettings::base_only();
    let ctx = ForwardCtx {
        t,
        t_max: schedule.t_max,
        run: &run,
        geometry: None,
        prompts: None,
        g: None,
    };
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape, &[]);
    let zs: Vec<Var> = z.into_iter().map(|zi| tape.constant(zi)).collect();
    let (_, cache) = Net { p: params, b: &bound }.run(&mut tape, &zs, &ctx, Mode::Collect)?;
    let levels = cache
        .into_iter()
        .map(|(l, vars)| (l, vars.iter().map(|&v| tape.value(v).clone()).collect()))
        .collect();
    Ok(GFeatures { t, levels })
}

/// Cross-attention maps of the clean views at `t = 0`.
///
/// With `run.maps0_with_fba` the FBA blocks stay active and `g0` supplies
/// their guidance features.
pub fn collect_noise_free_maps(
    params: &DenoiserParams,
    geometry: &NetGeometry,
    z0: &[Tensor],
    prompts: &[Vec<usize>],
    run: &RunSettings,
    t_max: usize,
    g0: Option<&GFeatures>,
) -> Result<Vec<AttentionMap>> {
    let run = RunSettings {
        fba_enabled: run.fba_enabled && run.maps0_with_fba,
        xa_enabled: true,
        ..*run
    };
    let ctx = ForwardCtx {
        t: 0,
        t_max,
        run: &run,
        geometry: Some(geometry),
        prompts: Some(prompts),
        g: g0,
    };
    forward(params, z0, &ctx).map(|(_, maps)| maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::params::Architecture;
    use crate::diffusion::make_schedule;
    use crate::geometry::make_view_ring;
    use crate::rng;

    fn small_arch() -> Architecture {
        Architecture {
            image_size: 8,
            widths: [4, 8],
            time_dim: 8,
            pe_bands: 1,
            vocab: 6,
            token_dim: 4,
            key_dim: 4,
            ..Architecture::default()
        }
    }

    fn inputs(n: usize, s: usize, seed: u64) -> Vec<Tensor> {
        (0..n)
            .map(|i| rng::randn(&[3, s, s], &mut rng::stream(seed, 0, i as u64, 0)))
            .collect()
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut p = DenoiserParams::init(&small_arch(), 0).unwrap();
        p.set("out.w", Tensor::zeros(&[3, 4, 3, 3])).unwrap();
        let run = RunSettings::base_only();
        let ctx = ForwardCtx {
            t: 5,
            t_max: 10,
            run: &run,
            geometry: None,
            prompts: None,
            g: None,
        };
        let (eps, maps) = forward(&p, &inputs(2, 8, 1), &ctx).unwrap();
        assert!(eps.iter().all(|e| e.max_abs() == 0.0));
        assert!(maps.is_empty());
    }

    #[test]
    fn fresh_blocks_match_base_network() {
        let p = DenoiserParams::init(&small_arch(), 2).unwrap();
        let vs = make_view_ring(4, 90.0, 8, 8).unwrap();
        let geo = NetGeometry::build(&p, &vs).unwrap();
        let sched = make_schedule(10, 1e-3, 0.05).unwrap();
        let z = inputs(4, 8, 3);
        let hat = inputs(4, 8, 4);
        let g = collect_g_features(&p, &hat, &z, 6, &sched).unwrap();
        let prompts: Vec<Vec<usize>> = (0..4).map(|i| vec![i, 5]).collect();
        let full = RunSettings::default();
        let base = RunSettings::base_only();
        let ctx = |run| ForwardCtx {
            t: 6,
            t_max: 10,
            run,
            geometry: Some(&geo),
            prompts: Some(&prompts),
            g: Some(&g),
        };
        let (a, maps) = forward(&p, &z, &ctx(&full)).unwrap();
        let (b, _) = forward(&p, &z, &ctx(&base)).unwrap();
        assert_eq!(a, b);
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].weights.shape(), &[4 * 16, 8]);
    }

    #[test]
    fn g_cache_shapes_and_shared_input() {
        let p = DenoiserParams::init(&small_arch(), 5).unwrap();
        let sched = make_schedule(10, 1e-3, 0.05).unwrap();
        let shared = inputs(1, 8, 6).pop().unwrap();
        let hat = vec![shared.clone(); 3];
        let g = collect_g_features(&p, &hat, &hat, 0, &sched).unwrap();
        assert_eq!(g.level(Level::Level1).unwrap()[0].shape(), &[4, 8, 8]);
        assert_eq!(g.level(Level::Level2).unwrap()[0].shape(), &[8, 4, 4]);
        let l1 = g.level(Level::Level1).unwrap();
        assert_eq!(l1[0], l1[2]);
        assert_eq!(g, collect_g_features(&p, &hat, &hat, 0, &sched).unwrap());
    }

    #[test]
    fn missing_guidance_is_an_error() {
        let p = DenoiserParams::init(&small_arch(), 7).unwrap();
        let vs = make_view_ring(2, 90.0, 8, 8).unwrap();
        let geo = NetGeometry::build(&p, &vs).unwrap();
        let run = RunSettings::default();
        let prompts = vec![vec![0], vec![1]];
        let ctx = ForwardCtx {
            t: 3,
            t_max: 10,
            run: &run,
            geometry: Some(&geo),
            prompts: Some(&prompts),
            g: None,
        };
        let err = forward(&p, &inputs(2, 8, 8), &ctx).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn noise_free_maps_are_deterministic() {
        let p = DenoiserParams::init(&small_arch(), 9).unwrap();
        let vs = make_view_ring(3, 90.0, 8, 8).unwrap();
        let geo = NetGeometry::build(&p, &vs).unwrap();
        let z0 = inputs(3, 8, 10);
        let prompts = vec![vec![0, 1], vec![2, 1], vec![3, 1]];
        let run = RunSettings {
            maps0_with_fba: false,
            ..RunSettings::default()
        };
        let a = collect_noise_free_maps(&p, &geo, &z0, &prompts, &run, 10, None).unwrap();
        let b = collect_noise_free_maps(&p, &geo, &z0, &prompts, &run, 10, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(crate::attention::xa_loss(&a, &b).unwrap(), 0.0);
        let permuted = vec![z0[2].clone(), z0[0].clone(), z0[1].clone()];
        let c = collect_noise_free_maps(&p, &geo, &permuted, &prompts, &run, 10, None).unwrap();
        assert!(crate::attention::xa_loss(&a, &c).unwrap() > 0.0);
    }
}
