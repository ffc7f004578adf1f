use std::cell::RefCell;

use super::network::{collect_g_features, forward, ForwardCtx, GFeatures, NetGeometry, RunSettings};
use super::params::DenoiserParams;
use crate::diffusion::{ddpm_step, Schedule};
use crate::error::{Error, Result};
use crate::geometry::ViewSet;
use crate::noise_init::{guidance_noise, initial_latent, NoiseBundle, NoiseSettings};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// Anything that predicts the noise in a joint set of views at step `t`.
pub trait EpsPredictor {
    fn predict(&self, z_t: &[Tensor], t: usize) -> Result<Vec<Tensor>>;
}

/// Predicts the exact noise given the clean views.
pub struct OracleDenoiser<'a> {
    pub z0: &'a [Tensor],
    pub schedule: &'a Schedule,
}

impl EpsPredictor for OracleDenoiser<'_> {
    fn predict(&self, z_t: &[Tensor], t: usize) -> Result<Vec<Tensor>> {
        let ab = self.schedule.alpha_bar[t];
        let k = 1.0 / (1.0 - ab).sqrt();
        z_t.iter()
            .zip(self.z0)
            .map(|(z, x)| z.lincomb(k, x, -ab.sqrt() * k))
            .collect()
    }
}

/// The trained network with its cross-view context.
pub struct NetworkPredictor<'a> {
    pub params: &'a DenoiserParams,
    pub geometry: &'a NetGeometry,
    pub run: &'a RunSettings,
    pub schedule: &'a Schedule,
    pub prompts: Option<&'a [Vec<usize>]>,
    /// Guidance noise `eps_hat^i` and per-view noise `eps^i` for the
    /// FBA-free pass.
    pub eps_hat: Vec<Tensor>,
    pub eps_view: Vec<Tensor>,
    /// Recompute guidance features at every step rather than once.
    pub recollect: bool,
    cache: RefCell<Option<GFeatures>>,
}

impl<'a> NetworkPredictor<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &'a DenoiserParams,
        geometry: &'a NetGeometry,
        run: &'a RunSettings,
        schedule: &'a Schedule,
        prompts: Option<&'a [Vec<usize>]>,
        eps_hat: Vec<Tensor>,
        eps_view: Vec<Tensor>,
        recollect: bool,
    ) -> Self {
        NetworkPredictor {
            params,
            geometry,
            run,
            schedule,
            prompts,
            eps_hat,
            eps_view,
            recollect,
            cache: RefCell::new(None),
        }
    }

    fn needs_guidance(&self) -> bool {
        self.run.fba_enabled && self.run.fba.non_overlap && !self.params.arch.fba_levels.is_empty()
    }
}

impl EpsPredictor for NetworkPredictor<'_> {
    fn predict(&self, z_t: &[Tensor], t: usize) -> Result<Vec<Tensor>> {
        if self.needs_guidance() {
            let stale = match &*self.cache.borrow() {
                Some(g) => self.recollect && g.t != t,
                None => true,
            };
            if stale {
                let g = collect_g_features(self.params, &self.eps_hat, &self.eps_view, t, self.schedule)?;
                *self.cache.borrow_mut() = Some(g);
            }
        }
        let cache = self.cache.borrow();
        let ctx = ForwardCtx {
            t,
            t_max: self.schedule.t_max,
            run: self.run,
            geometry: Some(self.geometry),
            prompts: self.prompts,
            g: cache.as_ref(),
        };
        forward(self.params, z_t, &ctx).map(|(eps, _)| eps)
    }
}

/// Runs the ancestral sampler from `z_T` down to `z_0`. Step noise for
/// view `i` at step `t` comes from its own counter stream; the last step is
/// noise-free.
pub fn reverse_loop(pred: &dyn EpsPredictor, z_start: Vec<Tensor>, schedule: &Schedule, seed: u64) -> Result<Vec<Tensor>> {
    let mut z = z_start;
    for t in (1..=schedule.t_max).rev() {
        let eps = pred.predict(&z, t)?;
        if eps.len() != z.len() {
            return Err(Error::shape(format!("{} predictions for {} views", eps.len(), z.len())));
        }
        z = z
            .iter()
            .zip(&eps)
            .enumerate()
            .map(|(i, (zi, ei))| {
                let noise = if t > 1 {
                    rng::randn(zi.shape(), &mut rng::stream(seed, domain::SAMPLE_STEP, t as u64, i as u64))
                } else {
                    Tensor::zeros(zi.shape())
                };
                ddpm_step(zi, ei, t, schedule, &noise)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(bad) = z.iter().position(|x| !x.all_finite()) {
            return Err(Error::Numerical(format!("view {bad} became non-finite at step {t}")));
        }
    }
    Ok(z)
}

/// Maps a latent in `[-1, 1]` to an image in `[0, 1]`.
pub fn to_image(z: &Tensor) -> Tensor {
    z.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Maps an image in `[0, 1]` to the model's `[-1, 1]` range.
pub fn from_image(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// Joint sampling options.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub seed: u64,
    pub recollect_g: bool,
}

/// Generates every view of `vs` jointly, starting from the noise chosen by
/// `noise`, and returns images in `[0, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_multiview(
    params: &DenoiserParams,
    vs: &ViewSet,
    bundle: &NoiseBundle,
    noise: &NoiseSettings,
    schedule: &Schedule,
    prompts: Option<&[Vec<usize>]>,
    run: &RunSettings,
    opts: SampleOptions,
) -> Result<Vec<Tensor>> {
    if bundle.n_views() != vs.n_views {
        return Err(Error::shape(format!("bundle has {} views, view set {}", bundle.n_views(), vs.n_views)));
    }
    let geometry = NetGeometry::build(params, vs)?;
    let n = vs.n_views;
    let z_start = (0..n).map(|i| initial_latent(bundle, i, noise)).collect::<Result<Vec<_>>>()?;
    let eps_hat = (0..n).map(|i| guidance_noise(bundle, i, noise)).collect::<Result<Vec<_>>>()?;
    let pred = NetworkPredictor::new(
        params,
        &geometry,
        run,
        schedule,
        prompts,
        eps_hat,
        bundle.eps_view.clone(),
        opts.recollect_g,
    );
    let z0 = reverse_loop(&pred, z_start, schedule, opts.seed)?;
    Ok(z0.iter().map(to_image).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::params::Architecture;
    use crate::diffusion::make_schedule;
    use crate::geometry::make_view_ring;
    use crate::noise_init::{sample_bundle, NoiseMode};

    #[test]
    fn oracle_recovers_clean_views() {
        let s = make_schedule(50, 1e-4, 0.02).unwrap();
        let z0: Vec<Tensor> = (0..3)
            .map(|i| rng::randn(&[3, 4, 4], &mut rng::stream(1, 0, i, 0)).scale(0.5))
            .collect();
        let oracle = OracleDenoiser { z0: &z0, schedule: &s };
        let start: Vec<Tensor> = (0..3).map(|i| rng::randn(&[3, 4, 4], &mut rng::stream(2, 0, i, 0))).collect();
        let out = reverse_loop(&oracle, start, &s, 3).unwrap();
        for (a, b) in out.iter().zip(&z0) {
            assert!(a.max_abs_diff(b) < 1e-3);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_single_view_works() {
        let arch = Architecture {
            image_size: 8,
            widths: [4, 8],
            time_dim: 8,
            pe_bands: 1,
            vocab: 4,
            token_dim: 4,
            key_dim: 4,
            ..Architecture::default()
        };
        let p = DenoiserParams::init(&arch, 0).unwrap();
        let s = make_schedule(5, 1e-3, 0.05).unwrap();
        let noise = NoiseSettings {
            mode: NoiseMode::Coordinate,
            alpha_mix: 1.0,
            stop_freq: 0.25,
        };
        let opts = SampleOptions {
            seed: 4,
            recollect_g: true,
        };
        let run = RunSettings::default();
        for n in [1, 3] {
            let vs = make_view_ring(n, 90.0, 8, 8).unwrap();
            let b = sample_bundle(&vs, &s, 3, 0.5, 7).unwrap();
            let prompts: Vec<Vec<usize>> = (0..n).map(|i| vec![i % 4]).collect();
            let a = sample_multiview(&p, &vs, &b, &noise, &s, Some(&prompts), &run, opts).unwrap();
            let c = sample_multiview(&p, &vs, &b, &noise, &s, Some(&prompts), &run, opts).unwrap();
            assert_eq!(a, c);
            assert_eq!(a.len(), n);
            assert!(a.iter().all(|x| x.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }
}
