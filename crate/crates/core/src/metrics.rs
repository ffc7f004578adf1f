//! Consistency and quality measurements for generated view sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{apply_mask, band_mask};
use crate::geometry::{correspondence, warp_features, ViewSet};
use crate::tensor::Tensor;

/// Pairing and clamping rules for overlap PSNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsnrOptions {
    /// Value reported for a zero-error overlap, in dB.
    pub cap_db: f64,
    /// Include the pair closing the ring (last view, first view).
    pub include_wrap: bool,
}

impl Default for PsnrOptions {
    fn default() -> Self {
        PsnrOptions {
            cap_db: 100.0,
            include_wrap: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPsnr {
    pub i: usize,
    pub j: usize,
    pub pixels: usize,
    pub mse: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapPsnr {
    pub mean_db: f64,
    /// Pairs with a nonempty overlap.
    pub pairs: Vec<PairPsnr>,
}

/// Ring-adjacent view pairs, each unordered pair once.
pub fn consecutive_pairs(n: usize, include_wrap: bool) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    if include_wrap && n > 2 {
        pairs.push((n - 1, 0));
    }
    pairs
}

/// `-10 log10(mse)` for unit-range images, clamped to `cap`.
pub fn psnr_from_mse(mse: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        cap
    } else {
        (-10.0 * mse.log10()).min(cap)
    }
}

/// Mean PSNR between each consecutive pair over the pixels of view `i`
/// that see view `j`, after warping `j` into `i`.
pub fn overlap_psnr(images: &[Tensor], vs: &ViewSet, opts: &PsnrOptions) -> Result<OverlapPsnr> {
    if images.len() != vs.n_views {
        return Err(Error::shape(format!("{} images for {} views", images.len(), vs.n_views)));
    }
    if images.len() < 2 {
        return Err(Error::Precondition("overlap PSNR needs at least two views".into()));
    }
    let mut pairs = Vec::new();
    for (i, j) in consecutive_pairs(vs.n_views, opts.include_wrap) {
        let corr = correspondence(vs, i, j)?;
        let warped = warp_features(&images[j], &corr)?;
        let (c, h, w) = images[i].chw()?;
        let plane = h * w;
        let mut sum = 0.0;
        let mut pixels = 0;
        for p in (0..plane).filter(|&p| corr.valid[p]) {
            pixels += 1;
            for k in 0..c {
                let d = images[i].data()[k * plane + p] - warped.data()[k * plane + p];
                sum += d * d;
            }
        }
        if pixels == 0 {
            continue;
        }
        let mse = sum / (pixels * c) as f64;
        pairs.push(PairPsnr {
            i,
            j,
            pixels,
            mse,
            psnr_db: psnr_from_mse(mse, opts.cap_db),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Undefined("no consecutive view pair overlaps".into()));
    }
    let mean_db = pairs.iter().map(|p| p.psnr_db).sum::<f64>() / pairs.len() as f64;
    Ok(OverlapPsnr { mean_db, pairs })
}

/// Overlap PSNR of `generated` divided by that of `ground_truth`.
pub fn psnr_ratio(generated: &[Tensor], ground_truth: &[Tensor], vs: &ViewSet, opts: &PsnrOptions) -> Result<f64> {
    let g = overlap_psnr(generated, vs, opts)?;
    let r = overlap_psnr(ground_truth, vs, opts)?;
    if r.mean_db == 0.0 {
        return Err(Error::Undefined("ground-truth overlap PSNR is zero".into()));
    }
    Ok(g.mean_db / r.mean_db)
}

const PATCH: usize = 4;
const ORIENT_BINS: usize = 8;

/// Hand-crafted patch statistics: per-channel mean and variance plus a
/// magnitude-weighted gradient-orientation histogram of the luminance.
pub fn patch_features(img: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = img.chw()?;
    let plane = h * w;
    let d = img.data();
    let gray: Vec<f64> = (0..plane)
        .map(|p| (0..c).map(|k| d[k * plane + p]).sum::<f64>() / c as f64)
        .collect();
    let at = |y: usize, x: usize| gray[y * w + x];
    let (ph, pw) = (PATCH.min(h), PATCH.min(w));
    let mut feats = Vec::new();
    for py in (0..h - ph + 1).step_by(ph) {
        for px in (0..w - pw + 1).step_by(pw) {
            let n = (ph * pw) as f64;
            for k in 0..c {
                let vals: Vec<f64> = (0..ph)
                    .flat_map(|y| (0..pw).map(move |x| (y, x)))
                    .map(|(y, x)| d[k * plane + (py + y) * w + px + x])
                    .collect();
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                feats.push(mean);
                feats.push(var);
            }
            let mut hist = [0.0; ORIENT_BINS];
            for y in py..py + ph {
                for x in px..px + pw {
                    let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
                    let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag == 0.0 {
                        continue;
                    }
                    let angle = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                    let bin = ((angle / std::f64::consts::PI * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
                    hist[bin] += mag / n;
                }
            }
            feats.extend_from_slice(&hist);
        }
    }
    Ok(feats)
}

/// Mean pairwise RMS distance between the patch features of all views.
/// Lower values mean a more uniform appearance across the scene.
pub fn intra_distance(images: &[Tensor]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Precondition("intra distance needs at least two views".into()));
    }
    let feats = images.iter().map(patch_features).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut count = 0;
    for a in 0..feats.len() {
        for b in a + 1..feats.len() {
            if feats[a].len() != feats[b].len() {
                return Err(Error::shape("views differ in size"));
            }
            let ms = feats[a]
                .iter()
                .zip(&feats[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / feats[a].len() as f64;
            total += ms.sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// How view pairs are lined up before correlating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Same pixel index in both views.
    Pixel,
    /// View `j` warped into view `i`, over corresponding pixels only.
    Correspondence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandCorrelation {
    /// Normalized Chebyshev radius range of the band.
    pub lo: f64,
    pub hi: f64,
    pub rho: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub alignment: Alignment,
    pub bands: Vec<BandCorrelation>,
}

/// Running sums for a Pearson correlation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Pearson {
    n: usize,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Pearson {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    pub fn merge(&mut self, o: &Pearson) {
        self.n += o.n;
        self.sx += o.sx;
        self.sy += o.sy;
        self.sxx += o.sxx;
        self.syy += o.syy;
        self.sxy += o.sxy;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Zero when either side has no variance.
    pub fn rho(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let cov = self.sxy - self.sx * self.sy / n;
        let vx = self.sxx - self.sx * self.sx / n;
        let vy = self.syy - self.sy * self.sy / n;
        if vx <= 0.0 || vy <= 0.0 {
            return 0.0;
        }
        cov / (vx * vy).sqrt()
    }
}

/// Accumulates band-limited cross-view correlation sums for consecutive
/// view pairs of one scene. One accumulator per band.
pub fn band_correlation_sums(latents: &[Tensor], vs: &ViewSet, bands: usize, alignment: Alignment) -> Result<Vec<Pearson>> {
    if latents.len() != vs.n_views || latents.len() < 2 {
        return Err(Error::Precondition("need one latent per view and at least two views".into()));
    }
    if bands == 0 {
        return Err(Error::config("at least one band"));
    }
    let (c, h, w) = latents[0].chw()?;
    let plane = h * w;
    let mut sums = vec![Pearson::default(); bands];
    for (b, acc) in sums.iter_mut().enumerate() {
        let mask = band_mask(b as f64 / bands as f64, (b + 1) as f64 / bands as f64, h, w, b + 1 == bands);
        let filtered = latents.iter().map(|x| apply_mask(x, &mask)).collect::<Result<Vec<_>>>()?;
        for (i, j) in consecutive_pairs(vs.n_views, true) {
            let (other, valid): (Tensor, Vec<bool>) = match alignment {
                Alignment::Pixel => (filtered[j].clone(), vec![true; plane]),
                Alignment::Correspondence => {
                    let corr = correspondence(vs, i, j)?;
                    (warp_features(&filtered[j], &corr)?, corr.valid)
                }
            };
            for k in 0..c {
                for p in (0..plane).filter(|&p| valid[p]) {
                    acc.push(filtered[i].data()[k * plane + p], other.data()[k * plane + p]);
                }
            }
        }
    }
    Ok(sums)
}

/// Pearson correlation between consecutive views in `bands` equal-width
/// radial frequency bands, lowest band first.
pub fn noise_correlation_report(latents: &[Tensor], vs: &ViewSet, bands: usize, alignment: Alignment) -> Result<CorrelationReport> {
    let sums = band_correlation_sums(latents, vs, bands, alignment)?;
    Ok(report_from_sums(&sums, alignment))
}

/// Builds a report from accumulated sums, e.g. pooled over scenes.
pub fn report_from_sums(sums: &[Pearson], alignment: Alignment) -> CorrelationReport {
    let n = sums.len();
    CorrelationReport {
        alignment,
        bands: sums
            .iter()
            .enumerate()
            .map(|(b, s)| BandCorrelation {
                lo: b as f64 / n as f64,
                hi: (b + 1) as f64 / n as f64,
                rho: s.rho(),
                samples: s.count(),
            })
            .collect(),
    }
}

/// Per-scene evaluation record, emitted as one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene_id: usize,
    pub method: String,
    pub overlap_psnr: f64,
    pub gt_overlap_psnr: f64,
    pub psnr_ratio: f64,
    pub intra_distance: f64,
    pub pairs: Vec<PairPsnr>,
    pub config_hash: String,
}

impl SceneReport {
    pub fn evaluate(
        scene_id: usize,
        method: &str,
        generated: &[Tensor],
        ground_truth: &[Tensor],
        vs: &ViewSet,
        opts: &PsnrOptions,
        config_hash: &str,
    ) -> Result<Self> {
        let g = overlap_psnr(generated, vs, opts)?;
        let r = overlap_psnr(ground_truth, vs, opts)?;
        if r.mean_db == 0.0 {
            return Err(Error::Undefined("ground-truth overlap PSNR is zero".into()));
        }
        Ok(SceneReport {
            scene_id,
            method: method.to_string(),
            overlap_psnr: g.mean_db,
            gt_overlap_psnr: r.mean_db,
            psnr_ratio: g.mean_db / r.mean_db,
            intra_distance: intra_distance(generated)?,
            pairs: g.pairs,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Mean and normal-approximation 95% half-width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}
