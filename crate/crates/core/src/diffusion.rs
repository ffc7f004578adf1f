//! DDPM variance schedule, forward noising and ancestral sampling steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear variance schedule. Vectors are indexed by `t` in `0..=t_max`;
/// index 0 is the noise-free boundary (`beta = 0`, `alpha_bar = 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if t_max == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1"
        )));
    }
    let mut beta = vec![0.0; t_max + 1];
    for (t, b) in beta.iter_mut().enumerate().skip(1) {
        *b = if t_max == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_max - 1) as f64
        };
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0; t_max + 1];
    for t in 1..=t_max {
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    Ok(Schedule {
        t_max,
        beta,
        alpha,
        alpha_bar,
    })
}

impl Schedule {
    pub fn sigma2(&self, t: usize) -> f64 {
        self.beta[t]
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.t_max {
            return Err(Error::Index(format!("timestep {t} outside [{min}, {}]", self.t_max)));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(z0: &Tensor, t: usize, eps: &Tensor, s: &Schedule) -> Result<Tensor> {
    s.check_t(t, 0)?;
    z0.ensure_same_shape(eps, "forward_sample")?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = s.alpha_bar[t];
    z0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Inverts [`forward_sample`] given a noise estimate.
pub fn predict_z0(z_t: &Tensor, eps_pred: &Tensor, t: usize, s: &Schedule) -> Result<Tensor> {
    s.check_t(t, 1)?;
    let ab = s.alpha_bar[t];
    let k = 1.0 / ab.sqrt();
    z_t.lincomb(k, eps_pred, -(1.0 - ab).sqrt() * k)
}

/// One ancestral step `z_t -> z_{t-1}` with posterior variance `beta_t`.
///
/// `noise` is supplied by the caller; pass zeros at `t = 1`.
pub fn ddpm_step(z_t: &Tensor, eps_pred: &Tensor, t: usize, s: &Schedule, noise: &Tensor) -> Result<Tensor> {
    s.check_t(t, 1)?;
    z_t.ensure_same_shape(eps_pred, "ddpm_step eps")?;
    z_t.ensure_same_shape(noise, "ddpm_step noise")?;
    let a = s.alpha[t];
    let b = s.beta[t];
    let coef = b / (1.0 - s.alpha_bar[t]).sqrt();
    let inv = 1.0 / a.sqrt();
    let sd = b.sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(noise.data())
        .map(|((z, e), n)| inv * (z - coef * e) + sd * n)
        .collect();
    Tensor::from_vec(z_t.shape(), data)
}
