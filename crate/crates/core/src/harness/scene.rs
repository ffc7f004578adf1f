//! Procedural panorama worlds and their renders.
//!
//! A world is a cylinder of radius one around the shared camera center with
//! a flat floor below and a plain ceiling above. The wall carries a colored
//! gradient and up to three flat primitives; the floor a sinusoidal
//! texture. Views are point-sampled along pixel rays, so every pixel of
//! every view is a pure function of its world ray.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::ViewSet;
use crate::rng::{self, domain};
use crate::tensor::Tensor;

pub const WALL_COLORS: [[f64; 3]; 5] = [
    [0.80, 0.30, 0.25],
    [0.25, 0.55, 0.80],
    [0.35, 0.70, 0.35],
    [0.85, 0.75, 0.35],
    [0.60, 0.40, 0.70],
];
pub const FLOOR_FREQS: [f64; 4] = [2.0, 4.0, 7.0, 11.0];
pub const OBJECT_COLORS: [[f64; 3]; 3] = [[0.95, 0.95, 0.90], [0.10, 0.10, 0.12], [0.95, 0.55, 0.10]];
/// Object attributes: color index `k % 3`, rectangle for `k < 3`, disk otherwise.
pub const OBJECT_KINDS: usize = 6;

pub const FLOOR_BASE: usize = WALL_COLORS.len();
pub const OBJECT_BASE: usize = FLOOR_BASE + FLOOR_FREQS.len();
/// Token for a view that shows no object.
pub const NO_OBJECT: usize = OBJECT_BASE + OBJECT_KINDS;
/// Size of the prompt vocabulary.
pub const VOCAB: usize = NO_OBJECT + 1;

const FLOOR_Y: f64 = 0.6;
const CEILING_Y: f64 = -0.8;
const FLOOR_COLOR: [f64; 3] = [0.55, 0.45, 0.35];
const CEILING_COLOR: [f64; 3] = [0.90, 0.90, 0.88];

/// A flat primitive painted on the wall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallObject {
    pub kind: usize,
    /// Center azimuth in radians.
    pub azimuth: f64,
    /// Center height on the wall (world `y`, down positive).
    pub height: f64,
    pub half_width: f64,
    pub half_height: f64,
}

impl WallObject {
    fn covers(&self, azimuth: f64, y: f64) -> bool {
        let da = wrap_angle(azimuth - self.azimuth) / self.half_width;
        let dy = (y - self.height) / self.half_height;
        if self.kind < 3 {
            da.abs() < 1.0 && dy.abs() < 1.0
        } else {
            da * da + dy * dy < 1.0
        }
    }

    pub fn token(&self) -> usize {
        OBJECT_BASE + self.kind
    }
}

/// World description of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub wall: usize,
    pub floor: usize,
    pub wall_phase: f64,
    pub floor_phase: f64,
    pub objects: Vec<WallObject>,
}

/// What a ray hits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub color: [f64; 3],
    pub depth: f64,
    /// Index of the visible object, if any.
    pub object: Option<usize>,
}

impl World {
    /// Draws a world from the scene stream of `(seed, scene_id)`.
    pub fn random(seed: u64, scene_id: usize) -> World {
        let mut r = rng::stream(seed, domain::SCENE, scene_id as u64, 0);
        let wall = r.random_range(0..WALL_COLORS.len());
        let floor = r.random_range(0..FLOOR_FREQS.len());
        let wall_phase = r.random_range(0.0..2.0 * PI);
        let floor_phase = r.random_range(0.0..2.0 * PI);
        let n_objects = r.random_range(1..=3);
        let objects = (0..n_objects)
            .map(|_| WallObject {
                kind: r.random_range(0..OBJECT_KINDS),
                azimuth: r.random_range(-PI..PI),
                height: r.random_range(-0.3..0.3),
                half_width: r.random_range(0.25..0.45),
                half_height: r.random_range(0.2..0.4),
            })
            .collect();
        World {
            wall,
            floor,
            wall_phase,
            floor_phase,
            objects,
        }
    }

    /// Shades a world-space ray direction.
    pub fn shade(&self, d: [f64; 3]) -> Hit {
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let rho = d[0].hypot(d[2]);
        let y_wall = if rho > 0.0 { d[1] / rho } else { d[1].signum() * f64::INFINITY };
        if y_wall > FLOOR_Y {
            let s = FLOOR_Y / d[1];
            let (px, pz) = (d[0] * s, d[2] * s);
            let f = FLOOR_FREQS[self.floor];
            let tex = 0.7 + 0.3 * (f * px + self.floor_phase).sin() * (f * pz + self.floor_phase).sin();
            return Hit {
                color: FLOOR_COLOR.map(|c| c * tex),
                depth: s * len,
                object: None,
            };
        }
        if y_wall < CEILING_Y {
            return Hit {
                color: CEILING_COLOR,
                depth: CEILING_Y / d[1] * len,
                object: None,
            };
        }
        let azimuth = d[0].atan2(d[2]);
        let depth = len / rho;
        let top = self
            .objects
            .iter()
            .enumerate()
            .rev()
            .find(|(_, o)| o.covers(azimuth, y_wall))
            .map(|(k, _)| k);
        let color = match top {
            Some(k) => OBJECT_COLORS[self.objects[k].kind % 3],
            None => {
                let g = 0.8 + 0.2 * (azimuth + self.wall_phase).cos() - 0.1 * y_wall;
                WALL_COLORS[self.wall].map(|c| (c * g).clamp(0.0, 1.0))
            }
        };
        Hit {
            color,
            depth,
            object: top,
        }
    }

    /// Renders every view of `vs`.
    pub fn render(&self, vs: &ViewSet) -> RenderedViews {
        let (h, w) = (vs.height, vs.width);
        let mut images = Vec::with_capacity(vs.n_views);
        let mut depths = Vec::with_capacity(vs.n_views);
        let mut prompts = Vec::with_capacity(vs.n_views);
        for i in 0..vs.n_views {
            let mut img = vec![0.0; 3 * h * w];
            let mut depth = vec![0.0; h * w];
            let mut counts = vec![0usize; self.objects.len()];
            for r in 0..h {
                for c in 0..w {
                    let d = vs.world_ray(i, (c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
                    let hit = self.shade(d);
                    for (k, v) in hit.color.iter().enumerate() {
                        img[k * h * w + r * w + c] = *v;
                    }
                    depth[r * w + c] = hit.depth;
                    if let Some(o) = hit.object {
                        counts[o] += 1;
                    }
                }
            }
            let best = counts
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map_or(NO_OBJECT, |(k, _)| self.objects[k].token());
            images.push(Tensor::from_vec(&[3, h, w], img).expect("render shape"));
            depths.push(Tensor::from_vec(&[1, h, w], depth).expect("depth shape"));
            prompts.push(vec![self.wall, FLOOR_BASE + self.floor, best]);
        }
        RenderedViews {
            images,
            depths,
            prompts,
        }
    }
}

/// Images in `[0, 1]`, depths and prompt tokens of every view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedViews {
    pub images: Vec<Tensor>,
    pub depths: Vec<Tensor>,
    pub prompts: Vec<Vec<usize>>,
}

/// Which half of the dataset a scene belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// One procedurally generated scene with its renders.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub id: usize,
    pub split: Split,
    pub world: World,
    pub views: RenderedViews,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI) % (2.0 * PI);
    if a < 0.0 {
        a += 2.0 * PI;
    }
    a - PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{correspondence, make_view_ring};

    #[test]
    fn wrap_angle_stays_in_range() {
        for k in -20..20 {
            let a = k as f64 * 0.7;
            let w = wrap_angle(a);
            assert!((-PI..PI).contains(&w));
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn renders_are_finite_and_in_range() {
        let vs = make_view_ring(8, 90.0, 16, 16).unwrap();
        for s in 0..5 {
            let v = World::random(3, s).render(&vs);
            assert_eq!(v.images.len(), 8);
            for img in &v.images {
                assert!(img.data().iter().all(|x| (0.0..=1.0).contains(x)));
            }
            for d in &v.depths {
                assert!(d.data().iter().all(|x| x.is_finite() && *x > 0.0));
            }
            for p in &v.prompts {
                assert_eq!(p.len(), 3);
                assert!(p.iter().all(|&t| t < VOCAB));
            }
        }
    }

    #[test]
    fn overlapping_pixels_see_the_same_world() {
        let vs = make_view_ring(8, 90.0, 16, 16).unwrap();
        let world = World::random(11, 2);
        let views = world.render(&vs);
        for i in 0..8 {
            let j = (i + 1) % 8;
            let corr = correspondence(&vs, i, j).unwrap();
            let mut checked = 0;
            for (p, (&ok, u)) in corr.valid.iter().zip(&corr.map_u).enumerate() {
                if !ok {
                    continue;
                }
                let (r, c) = (p / 16, p % 16);
                let from_j = world.shade(vs.world_ray(j, u[0], u[1]));
                for k in 0..3 {
                    let a = views.images[i].data()[k * 256 + r * 16 + c];
                    assert!((a - from_j.color[k]).abs() < 1e-9, "view {i} pixel {p}");
                }
                checked += 1;
            }
            assert!(checked > 0);
        }
    }
}
