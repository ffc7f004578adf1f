//! Centered 2-D spectra, time-dependent spectral masks and feature filtering.
//!
//! The forward transform is unnormalized; the inverse divides by `H * W`.
//! Spectra are stored shifted so that the zero frequency of an axis of
//! length `n` sits at index `n / 2`; signed frequency `k` lives at
//! `k + n / 2` for `k` in `[-n/2, (n-1)/2]`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Centered spectrum of a real `[..., H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

impl Spectrum {
    pub fn magnitude_sq_sum(&self) -> f64 {
        self.re.sum_sq() + self.im.sum_sq()
    }
}

struct Plans {
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
}

fn plans(h: usize, w: usize, inverse: bool) -> Plans {
    let mut planner = FftPlanner::new();
    if inverse {
        Plans {
            row: planner.plan_fft_inverse(w),
            col: planner.plan_fft_inverse(h),
        }
    } else {
        Plans {
            row: planner.plan_fft_forward(w),
            col: planner.plan_fft_forward(h),
        }
    }
}

/// In-place 2-D transform of one `h x w` row-major plane.
fn transform_plane(buf: &mut [Complex<f64>], h: usize, w: usize, p: &Plans) {
    for row in buf.chunks_mut(w) {
        p.row.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        p.col.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("need at least 2 axes, got {shape:?}")));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if h == 0 || w == 0 {
        return Err(Error::shape("empty spatial axes"));
    }
    let planes = shape.iter().product::<usize>() / (h * w);
    Ok((planes, h, w))
}

/// Cyclic shift of a plane by `(dy, dx)`: output `[r][c] = input[r - dy][c - dx]`.
fn roll_plane<T: Copy>(src: &[T], h: usize, w: usize, dy: usize, dx: usize) -> Vec<T> {
    let mut out = src.to_vec();
    for r in 0..h {
        for c in 0..w {
            out[((r + dy) % h) * w + (c + dx) % w] = src[r * w + c];
        }
    }
    out
}

/// 2-D DFT over the last two axes, centered.
pub fn fft2(x: &Tensor) -> Result<Spectrum> {
    let (planes, h, w) = plane_dims(x.shape())?;
    let p = plans(h, w, false);
    let n = h * w;
    let mut re = vec![0.0; x.len()];
    let mut im = vec![0.0; x.len()];
    for k in 0..planes {
        let mut buf: Vec<Complex<f64>> = x.data()[k * n..(k + 1) * n]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        transform_plane(&mut buf, h, w, &p);
        let shifted = roll_plane(&buf, h, w, h / 2, w / 2);
        for (i, z) in shifted.into_iter().enumerate() {
            re[k * n + i] = z.re;
            im[k * n + i] = z.im;
        }
    }
    Ok(Spectrum {
        re: Tensor::from_vec(x.shape(), re)?,
        im: Tensor::from_vec(x.shape(), im)?,
    })
}

/// Inverse of [`fft2`]; returns the real part.
pub fn ifft2(s: &Spectrum) -> Result<Tensor> {
    s.re.ensure_same_shape(&s.im, "spectrum parts")?;
    let (planes, h, w) = plane_dims(s.re.shape())?;
    let p = plans(h, w, true);
    let n = h * w;
    let norm = 1.0 / n as f64;
    let mut out = vec![0.0; s.re.len()];
    for k in 0..planes {
        let centered: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(s.re.data()[k * n + i], s.im.data()[k * n + i]))
            .collect();
        // Undo the centering shift: move index n/2 back to 0.
        let mut buf = roll_plane(&centered, h, w, h - h / 2, w - w / 2);
        transform_plane(&mut buf, h, w, &p);
        for (i, z) in buf.into_iter().enumerate() {
            out[k * n + i] = z.re * norm;
        }
    }
    Tensor::from_vec(s.re.shape(), out)
}

/// Time-dependent mask radius `1 - t / T`.
pub fn radius(t: usize, t_max: usize) -> f64 {
    1.0 - t as f64 / t_max as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    BinaryHpf,
    GaussianHpf,
    BinaryLpf,
    GaussianLpf,
    None,
}

/// Which radius drives the mask as denoising proceeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDirection {
    /// `r_t = 1 - t/T`.
    #[serde(rename = "r_t")]
    Rt,
    /// `1 - r_t = t/T`.
    #[serde(rename = "one_minus_r_t")]
    OneMinusRt,
}

impl FilterDirection {
    pub fn radius(self, t: usize, t_max: usize) -> f64 {
        match self {
            FilterDirection::Rt => radius(t, t_max),
            FilterDirection::OneMinusRt => 1.0 - radius(t, t_max),
        }
    }
}

/// Spectral mask over a centered `H x W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqMask {
    pub kind: FilterKind,
    pub r: f64,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<f64>,
}

impl FreqMask {
    pub fn is_all(&self, v: f64) -> bool {
        self.mask.iter().all(|&m| m == v)
    }

    pub fn zero_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 0.0).count()
    }
}

/// True when the centered bin `(row, col)` falls in the closed stop square of
/// half-extent `(r H / 2, r W / 2)`. The square is empty at `r = 0` and
/// covers the whole grid at `r = 1`.
fn in_stop_square(row: usize, col: usize, r: f64, h: usize, w: usize) -> bool {
    if r <= 0.0 {
        return false;
    }
    let ky = (row as f64 - (h / 2) as f64).abs();
    let kx = (col as f64 - (w / 2) as f64).abs();
    ky <= r * h as f64 / 2.0 && kx <= r * w as f64 / 2.0
}

/// Builds the spectral mask of the given kind at radius `r`.
///
/// High-pass kinds are zero inside the central region and one elsewhere;
/// low-pass kinds are their complements.
pub fn hpf_mask(r: f64, h: usize, w: usize, kind: FilterKind) -> FreqMask {
    let r = r.clamp(0.0, 1.0);
    let gaussian_hpf = |row: usize, col: usize| {
        if r <= 0.0 {
            return 1.0;
        }
        let sigma = r * h.min(w) as f64 / 2.0;
        let ky = row as f64 - (h / 2) as f64;
        let kx = col as f64 - (w / 2) as f64;
        1.0 - (-(ky * ky + kx * kx) / (sigma * sigma)).exp()
    };
    let mut mask = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let stop = in_stop_square(row, col, r, h, w);
            mask[row * w + col] = match kind {
                FilterKind::BinaryHpf => f64::from(!stop as u8),
                FilterKind::BinaryLpf => f64::from(stop as u8),
                FilterKind::GaussianHpf => gaussian_hpf(row, col),
                FilterKind::GaussianLpf => 1.0 - gaussian_hpf(row, col),
                FilterKind::None => 1.0,
            };
        }
    }
    FreqMask {
        kind,
        r,
        height: h,
        width: w,
        mask,
    }
}

/// Multiplies every plane's spectrum by `mask` and transforms back.
///
/// All-pass and all-stop masks short-circuit so they are exact.
pub fn apply_mask(x: &Tensor, mask: &FreqMask) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(x.shape())?;
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::shape(format!(
            "mask {}x{} vs input {h}x{w}",
            mask.height, mask.width
        )));
    }
    if mask.is_all(1.0) {
        return Ok(x.clone());
    }
    if mask.is_all(0.0) {
        return Ok(Tensor::zeros(x.shape()));
    }
    let mut s = fft2(x)?;
    let n = h * w;
    for k in 0..planes {
        for i in 0..n {
            s.re.data_mut()[k * n + i] *= mask.mask[i];
            s.im.data_mut()[k * n + i] *= mask.mask[i];
        }
    }
    ifft2(&s)
}

/// Per-channel encoding of a scalar such as the spectral radius.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarEncoding {
    Off,
    /// Transformer-style sinusoid: channel pairs `(sin, cos)` of
    /// `value * 1000^(-k / (C/2))`, scaled so `value` in `[0,1]` spans
    /// several periods on the fastest channel.
    Sinusoidal,
}

impl ScalarEncoding {
    pub fn encode(self, value: f64, channels: usize) -> Vec<f64> {
        match self {
            ScalarEncoding::Off => vec![0.0; channels],
            ScalarEncoding::Sinusoidal => sinusoidal_embedding(value * 100.0, channels),
        }
    }
}

/// Sinusoidal embedding of a scalar into `channels` values.
pub fn sinusoidal_embedding(value: f64, channels: usize) -> Vec<f64> {
    let half = channels / 2;
    let mut out = vec![0.0; channels];
    for k in 0..half {
        let freq = (-(1000f64.ln()) * k as f64 / half.max(1) as f64).exp();
        out[k] = (value * freq).sin();
        out[half + k] = (value * freq).cos();
    }
    out
}

fn add_channel_bias(mut x: Tensor, bias: &[f64]) -> Tensor {
    let c = x.shape()[0];
    let plane = x.len() / c;
    for (k, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v += bias[k]);
    }
    x
}

/// Spectrally filters `g: [C,H,W]` with the mask for step `t` and adds the
/// encoding of `1 - r_t` as a per-channel bias.
pub fn filter_features(g: &Tensor, t: usize, t_max: usize, kind: FilterKind, pe: ScalarEncoding) -> Result<Tensor> {
    filter_features_with_direction(g, t, t_max, kind, FilterDirection::Rt, pe)
}

/// [`filter_features`] with an explicit radius schedule.
pub fn filter_features_with_direction(
    g: &Tensor,
    t: usize,
    t_max: usize,
    kind: FilterKind,
    direction: FilterDirection,
    pe: ScalarEncoding,
) -> Result<Tensor> {
    let (c, h, w) = g.chw()?;
    let r = direction.radius(t, t_max);
    let filtered = apply_mask(g, &hpf_mask(r, h, w, kind))?;
    Ok(add_channel_bias(filtered, &pe.encode(1.0 - radius(t, t_max), c)))
}

/// Low- or high-pass filtering along either radius direction, without the
/// radius encoding. Used by the filter ablations.
pub fn lpf_filter_features(
    g: &Tensor,
    t: usize,
    t_max: usize,
    kind: FilterKind,
    direction: FilterDirection,
) -> Result<Tensor> {
    filter_features_with_direction(g, t, t_max, kind, direction, ScalarEncoding::Off)
}

/// Binary band-pass mask selecting centered bins whose normalized Chebyshev
/// radius `max(|ky|/(H/2), |kx|/(W/2))` lies in `[lo, hi)`, or `[lo, hi]`
/// when `closed_top`.
pub fn band_mask(lo: f64, hi: f64, h: usize, w: usize, closed_top: bool) -> FreqMask {
    let mut mask = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let ky = (row as f64 - (h / 2) as f64).abs() / (h as f64 / 2.0);
            let kx = (col as f64 - (w / 2) as f64).abs() / (w as f64 / 2.0);
            let rho = ky.max(kx);
            let inside = rho >= lo && (rho < hi || (closed_top && rho <= hi));
            mask[row * w + col] = f64::from(inside as u8);
        }
    }
    FreqMask {
        kind: FilterKind::None,
        r: hi,
        height: h,
        width: w,
        mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Direct O(N^2) DFT of one plane, centered, as an independent oracle.
    fn naive_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for m in 0..h {
            for n in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for a in 0..h {
                    for b in 0..w {
                        let ang = -2.0 * PI * (a as f64 * m as f64 / h as f64 + b as f64 * n as f64 / w as f64);
                        sr += x[a * w + b] * ang.cos();
                        si += x[a * w + b] * ang.sin();
                    }
                }
                let (cm, cn) = ((m + h / 2) % h, (n + w / 2) % w);
                re[cm * w + cn] = sr;
                im[cm * w + cn] = si;
            }
        }
        (re, im)
    }

    #[test]
    fn matches_naive_dft_on_odd_and_even_sizes() {
        for (h, w) in [(4, 6), (5, 3), (8, 8)] {
            let x = rng::randn(&[h, w], &mut rng::stream(h as u64, 0, w as u64, 0));
            let s = fft2(&x).unwrap();
            let (re, im) = naive_dft(x.data(), h, w);
            for i in 0..h * w {
                assert!((s.re.data()[i] - re[i]).abs() < 1e-9);
                assert!((s.im.data()[i] - im[i]).abs() < 1e-9);
            }
            assert!(ifft2(&s).unwrap().max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn constant_input_has_single_dc_bin() {
        let x = Tensor::full(&[1, 8, 6], 0.75);
        let s = fft2(&x).unwrap();
        for i in 0..48 {
            let expect = if i == 4 * 6 + 3 { 0.75 * 48.0 } else { 0.0 };
            assert!((s.re.data()[i] - expect).abs() < 1e-12);
            assert!(s.im.data()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_input_hits_plus_minus_three() {
        let (h, w) = (8usize, 16usize);
        let x = Tensor::from_fn(&[h, w], |i| (2.0 * PI * 3.0 * (i % w) as f64 / w as f64).cos());
        let s = fft2(&x).unwrap();
        let dc = (h / 2) * w + w / 2;
        for i in 0..h * w {
            let mag = s.re.data()[i].hypot(s.im.data()[i]);
            // Closed form: H W / 2 at kx = +-3, ky = 0.
            let expect = if i == dc + 3 || i == dc - 3 { (h * w) as f64 / 2.0 } else { 0.0 };
            assert!((mag - expect).abs() < 1e-9, "bin {i}");
        }
    }

    #[test]
    fn radius_endpoints() {
        assert_eq!(radius(10, 10), 0.0);
        assert_eq!(radius(0, 10), 1.0);
        assert_eq!(radius(5, 10), 0.5);
    }

    #[test]
    fn mask_endpoints_and_enumeration() {
        assert!(hpf_mask(0.0, 8, 8, FilterKind::BinaryHpf).is_all(1.0));
        assert!(hpf_mask(1.0, 8, 8, FilterKind::BinaryHpf).is_all(0.0));
        assert!(hpf_mask(0.0, 8, 8, FilterKind::GaussianHpf).is_all(1.0));
        // Brute force: signed frequencies k in [-4, 3], stop when |k| <= 2 on both axes.
        let mut count = 0;
        for ky in -4i32..4 {
            for kx in -4i32..4 {
                if ky.abs() <= 2 && kx.abs() <= 2 {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 25);
        assert_eq!(hpf_mask(0.5, 8, 8, FilterKind::BinaryHpf).zero_count(), count);
    }

    #[test]
    fn filter_endpoints() {
        let g = rng::randn(&[3, 8, 8], &mut rng::stream(7, 0, 0, 0));
        let off = ScalarEncoding::Off;
        assert_eq!(filter_features(&g, 10, 10, FilterKind::BinaryHpf, off).unwrap(), g);
        assert_eq!(filter_features(&g, 0, 10, FilterKind::BinaryHpf, off).unwrap().max_abs(), 0.0);
        let c = Tensor::full(&[3, 8, 8], 2.5);
        assert!(filter_features(&c, 5, 10, FilterKind::BinaryHpf, off).unwrap().max_abs() < 1e-12);
        let enc = filter_features(&c, 10, 10, FilterKind::BinaryHpf, ScalarEncoding::Sinusoidal).unwrap();
        let bias = ScalarEncoding::Sinusoidal.encode(1.0, 3);
        assert_eq!(enc.data()[0], 2.5 + bias[0]);
    }

    #[test]
    fn directional_variants() {
        let g = rng::randn(&[2, 8, 8], &mut rng::stream(8, 0, 0, 0));
        let lpf = FilterKind::BinaryLpf;
        assert_eq!(lpf_filter_features(&g, 10, 10, lpf, FilterDirection::Rt).unwrap().max_abs(), 0.0);
        assert_eq!(lpf_filter_features(&g, 0, 10, lpf, FilterDirection::Rt).unwrap(), g);
        let hpf = FilterKind::BinaryHpf;
        assert_eq!(
            lpf_filter_features(&g, 10, 10, hpf, FilterDirection::OneMinusRt).unwrap(),
            lpf_filter_features(&g, 0, 10, hpf, FilterDirection::Rt).unwrap()
        );
    }

    proptest! {
        #[test]
        fn parseval_and_roundtrip(seed in 0u64..500) {
            let x = rng::randn(&[2, 16, 16], &mut rng::stream(seed, 1, 0, 0));
            let s = fft2(&x).unwrap();
            let lhs = x.sum_sq();
            let rhs = s.magnitude_sq_sum() / 256.0;
            prop_assert!((lhs - rhs).abs() / lhs < 1e-5);
            prop_assert!(ifft2(&s).unwrap().max_abs_diff(&x) < 1e-6);
        }

        #[test]
        fn lpf_hpf_complement(r in 0.0f64..=1.0, h in 1usize..12, w in 1usize..12) {
            let hp = hpf_mask(r, h, w, FilterKind::BinaryHpf);
            let lp = hpf_mask(r, h, w, FilterKind::BinaryLpf);
            for (a, b) in hp.mask.iter().zip(&lp.mask) {
                prop_assert_eq!(a + b, 1.0);
                prop_assert!(*a == 0.0 || *a == 1.0);
            }
        }

        #[test]
        fn binary_filter_is_idempotent_and_linear(seed in 0u64..200, t in 0usize..=20, a in -2.0f64..2.0) {
            let mut r = rng::stream(seed, 2, 0, 0);
            let g1 = rng::randn(&[2, 8, 8], &mut r);
            let g2 = rng::randn(&[2, 8, 8], &mut r);
            let off = ScalarEncoding::Off;
            let k = FilterKind::BinaryHpf;
            let once = filter_features(&g1, t, 20, k, off).unwrap();
            let twice = filter_features(&once, t, 20, k, off).unwrap();
            prop_assert!(once.max_abs_diff(&twice) < 1e-12);
            let mix = g1.lincomb(1.0, &g2, a).unwrap();
            let lhs = filter_features(&mix, t, 20, k, off).unwrap();
            let rhs = once.lincomb(1.0, &filter_features(&g2, t, 20, k, off).unwrap(), a).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }
    }
}
