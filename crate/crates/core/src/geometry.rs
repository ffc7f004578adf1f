//! Panoramic camera rings: pinhole views rotating about a shared center.
//!
//! Conventions: the world `y` axis points down, cameras look along `+z`,
//! and a positive yaw turns the camera towards `+x`. Normalized image
//! coordinates run over `[0, 1]` with pixel `(r, c)` centered at
//! `((c + 0.5) / W, (r + 0.5) / H)`. Pixels are square, so the vertical
//! field of view follows from the horizontal one and the aspect ratio.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::Taps;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Camera ring description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    pub n_views: usize,
    pub yaw_step_deg: f64,
    pub fov_deg: f64,
    pub height: usize,
    pub width: usize,
    pub center_index: usize,
    /// Yaw of every view in degrees, `[0, 360)`.
    pub yaws_deg: Vec<f64>,
}

/// Builds a uniform ring of `n_views` cameras spaced `360 / n_views` apart.
pub fn make_view_ring(n_views: usize, fov_deg: f64, height: usize, width: usize) -> Result<ViewSet> {
    if n_views == 0 {
        return Err(Error::config("a view ring needs at least one view"));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::config(format!("field of view {fov_deg} outside (0, 180)")));
    }
    if height == 0 || width == 0 {
        return Err(Error::config("image size must be positive"));
    }
    let step = 360.0 / n_views as f64;
    let yaws_deg = (0..n_views).map(|i| (i as f64 * step) % 360.0).collect();
    Ok(ViewSet {
        n_views,
        yaw_step_deg: step,
        fov_deg,
        height,
        width,
        center_index: n_views / 2,
        yaws_deg,
    })
}

impl ViewSet {
    pub fn yaw_deg(&self, i: usize) -> f64 {
        self.yaws_deg[i]
    }

    /// Focal length in units of the image width.
    pub fn focal(&self) -> f64 {
        0.5 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    fn aspect(&self) -> f64 {
        self.height as f64 / self.width as f64
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n_views {
            return Err(Error::Index(format!("view {i} of {}", self.n_views)));
        }
        Ok(())
    }

    /// A contiguous run of ring views `start, start+1, ...` (wrapping).
    ///
    /// The reference view of the subset is its middle element.
    pub fn window(&self, start: usize, len: usize) -> Result<ViewSet> {
        if len == 0 || len > self.n_views {
            return Err(Error::config(format!("window of {len} views from a ring of {}", self.n_views)));
        }
        let yaws_deg = (0..len).map(|k| self.yaws_deg[(start + k) % self.n_views]).collect();
        Ok(ViewSet {
            n_views: len,
            yaw_step_deg: self.yaw_step_deg,
            fov_deg: self.fov_deg,
            height: self.height,
            width: self.width,
            center_index: len / 2,
            yaws_deg,
        })
    }

    /// Same cameras rendered at another resolution.
    pub fn with_resolution(&self, height: usize, width: usize) -> ViewSet {
        ViewSet {
            height,
            width,
            ..self.clone()
        }
    }

    /// Camera-frame ray through normalized image point `(x, y)`.
    pub fn ray(&self, x: f64, y: f64) -> [f64; 3] {
        let f = self.focal();
        [(x - 0.5) / f, (y - 0.5) * self.aspect() / f, 1.0]
    }

    /// Projects a camera-frame direction; `None` when behind the camera.
    pub fn project(&self, d: [f64; 3]) -> Option<(f64, f64)> {
        if d[2] <= 0.0 {
            return None;
        }
        Some(self.project_homogeneous(d))
    }

    /// Perspective division without the visibility test.
    fn project_homogeneous(&self, d: [f64; 3]) -> (f64, f64) {
        let f = self.focal();
        let z = if d[2].abs() < 1e-12 { 1e-12f64.copysign(d[2]) } else { d[2] };
        (d[0] / z * f + 0.5, d[1] / z * f / self.aspect() + 0.5)
    }

    /// Direction of view `i`'s pixel ray in world coordinates.
    pub fn world_ray(&self, i: usize, x: f64, y: f64) -> [f64; 3] {
        rotate_yaw(self.ray(x, y), self.yaw_deg(i).to_radians())
    }
}

/// Rotation about the vertical axis by `angle` radians.
pub fn rotate_yaw(d: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * d[0] + s * d[2], d[1], -s * d[0] + c * d[2]]
}

fn relative_yaw(vs: &ViewSet, from: usize, to: usize) -> f64 {
    (vs.yaw_deg(from) - vs.yaw_deg(to)).to_radians()
}

fn pixel_center(idx: usize, n: usize) -> f64 {
    (idx as f64 + 0.5) / n as f64
}

/// Dense map from the pixels of one view into the image plane of another.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub source_view: usize,
    pub target_view: usize,
    pub height: usize,
    pub width: usize,
    /// Normalized `(x, y)` in the target view for each source pixel.
    pub map_u: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl Correspondence {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }

    pub fn is_identity(&self) -> bool {
        self.source_view == self.target_view
    }

    /// Bilinear taps into the target grid, one entry per source pixel.
    pub fn bilinear_taps(&self) -> Vec<Taps> {
        let (h, w) = (self.height, self.width);
        self.map_u
            .iter()
            .zip(&self.valid)
            .map(|(&[x, y], &ok)| ok.then(|| bilinear_tap(x, y, h, w)))
            .collect()
    }

    /// Displacement `u* - u` in normalized units for each source pixel;
    /// zero where the correspondence is invalid.
    pub fn displacement(&self) -> Vec<[f64; 2]> {
        let (h, w) = (self.height, self.width);
        (0..h * w)
            .map(|p| {
                if !self.valid[p] {
                    return [0.0, 0.0];
                }
                let [x, y] = self.map_u[p];
                [x - pixel_center(p % w, w), y - pixel_center(p / w, h)]
            })
            .collect()
    }
}

/// Bilinear sampling taps at normalized `(x, y)` on an `h x w` grid, edge-clamped.
pub fn bilinear_tap(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let px = snap((x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64));
    let py = snap((y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64));
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Correspondence from view `i` to view `j` at the view set's image size.
pub fn correspondence(vs: &ViewSet, i: usize, j: usize) -> Result<Correspondence> {
    correspondence_at(vs, i, j, vs.height, vs.width)
}

/// Correspondence from view `i` to view `j` sampled on an `h x w` grid.
pub fn correspondence_at(vs: &ViewSet, i: usize, j: usize, h: usize, w: usize) -> Result<Correspondence> {
    vs.check_index(i)?;
    vs.check_index(j)?;
    let mut map_u = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    let angle = relative_yaw(vs, i, j);
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (pixel_center(c, w), pixel_center(r, h));
            if i == j {
                map_u.push([x, y]);
                valid.push(true);
                continue;
            }
            let d = rotate_yaw(vs.ray(x, y), angle);
            match vs.project(d) {
                Some((u, v)) if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) => {
                    map_u.push([u, v]);
                    valid.push(true);
                }
                _ => {
                    map_u.push([0.0, 0.0]);
                    valid.push(false);
                }
            }
        }
    }
    Ok(Correspondence {
        source_view: i,
        target_view: j,
        height: h,
        width: w,
        map_u,
        valid,
    })
}

/// Binary overlap mask between a view pair at some feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMask {
    pub pair: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub mask: Vec<f64>,
}

impl OverlapMask {
    pub fn area(&self) -> f64 {
        self.mask.iter().sum()
    }
}

/// Pools the validity of `corr` onto an `feat_h x feat_w` grid.
///
/// A cell is 1 when a strict majority of the pixels it covers are valid.
pub fn overlap_mask(corr: &Correspondence, feat_h: usize, feat_w: usize) -> Result<OverlapMask> {
    if feat_h == 0 || feat_w == 0 || corr.height % feat_h != 0 || corr.width % feat_w != 0 {
        return Err(Error::shape(format!(
            "feature grid {feat_h}x{feat_w} does not divide {}x{}",
            corr.height, corr.width
        )));
    }
    let (sy, sx) = (corr.height / feat_h, corr.width / feat_w);
    let mut mask = vec![0.0; feat_h * feat_w];
    for r in 0..feat_h {
        for c in 0..feat_w {
            let mut count = 0;
            for dy in 0..sy {
                for dx in 0..sx {
                    if corr.valid[(r * sy + dy) * corr.width + c * sx + dx] {
                        count += 1;
                    }
                }
            }
            if 2 * count > sy * sx {
                mask[r * feat_w + c] = 1.0;
            }
        }
    }
    Ok(OverlapMask {
        pair: (corr.source_view, corr.target_view),
        height: feat_h,
        width: feat_w,
        mask,
    })
}

/// Cosine-remapped coordinates of view `i` expressed in the reference
/// view's image plane, shape `[2, H, W]` (x channel, then y).
pub fn coordinate_field(vs: &ViewSet, i: usize) -> Result<Tensor> {
    vs.check_index(i)?;
    let (h, w) = (vs.height, vs.width);
    let angle = relative_yaw(vs, i, vs.center_index);
    let mut data = vec![0.0; 2 * h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (pixel_center(c, w), pixel_center(r, h));
            let (u, v) = if i == vs.center_index {
                (x, y)
            } else {
                vs.project_homogeneous(rotate_yaw(vs.ray(x, y), angle))
            };
            data[r * w + c] = (PI * u).cos();
            data[h * w + r * w + c] = (PI * v).cos();
        }
    }
    Tensor::from_vec(&[2, h, w], data)
}

/// Samples `features_j: [C,h,w]` at the correspondence targets; invalid
/// pixels are zero.
pub fn warp_features(features_j: &Tensor, corr: &Correspondence) -> Result<Tensor> {
    let (_, h, w) = features_j.chw()?;
    if h != corr.height || w != corr.width {
        return Err(Error::shape(format!(
            "features {h}x{w} vs correspondence {}x{}",
            corr.height, corr.width
        )));
    }
    if corr.is_identity() {
        return Ok(features_j.clone());
    }
    Ok(crate::autograd::resample_forward(features_j, &corr.bilinear_taps(), (h, w)))
}
