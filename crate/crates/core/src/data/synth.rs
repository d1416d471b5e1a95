//! Procedural road-like scenes: a pinhole camera 1.5 m above a ground plane
//! with a few boxes and spheres resting on it. Depth is the analytic z of
//! the first ray hit; the image is a Lambert-shaded rendering of the same
//! geometry.

use rand::Rng;

use crate::data::png::RgbImage;
use crate::data::SceneSample;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};

pub const MIN_DEPTH: f64 = 0.5;
pub const MAX_DEPTH: f64 = 10.0;
const CAMERA_HEIGHT: f64 = 1.5;

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Axis-aligned box `[min, max]` in camera coordinates (y down).
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    color: [f64; 3],
}

struct Hit {
    t: f64,
    normal: [f64; 3],
    color: [f64; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn intersect(shape: &Shape, dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
    match *shape {
        Shape::Box { min, max } => {
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            let mut axis = 0;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if 0.0 < min[a] || 0.0 > max[a] {
                        return None;
                    }
                    continue;
                }
                let (mut lo, mut hi) = (min[a] / dir[a], max[a] / dir[a]);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                if lo > t0 {
                    t0 = lo;
                    axis = a;
                }
                t1 = t1.min(hi);
            }
            if t0 > t1 || t0 <= 0.0 {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = -dir[axis].signum();
            Some((t0, n))
        }
        Shape::Sphere { center, radius } => {
            let b = dot(dir, center);
            let dd = dot(dir, dir);
            let disc = b * b - dd * (dot(center, center) - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let t = (b - disc.sqrt()) / dd;
            if t <= 0.0 {
                return None;
            }
            let p = [dir[0] * t, dir[1] * t, dir[2] * t];
            Some((t, [(p[0] - center[0]) / radius, (p[1] - center[1]) / radius, (p[2] - center[2]) / radius]))
        }
    }
}

fn random_objects(rng: &mut impl Rng) -> Vec<Object> {
    let n = rng.random_range(2..=5);
    (0..n)
        .map(|_| {
            let x = rng.random_range(-3.0..3.0);
            let z = rng.random_range(3.0..9.0);
            let color = [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)];
            let shape = if rng.random_bool(0.5) {
                let (sx, sy, sz) =
                    (rng.random_range(0.3..1.2), rng.random_range(0.4..2.0), rng.random_range(0.3..1.2));
                Shape::Box {
                    min: [x - sx / 2.0, CAMERA_HEIGHT - sy, z - sz / 2.0],
                    max: [x + sx / 2.0, CAMERA_HEIGHT, z + sz / 2.0],
                }
            } else {
                let r = rng.random_range(0.3..0.9);
                Shape::Sphere { center: [x, CAMERA_HEIGHT - r, z], radius: r }
            };
            Object { shape, color }
        })
        .collect()
}

fn trace(dir: [f64; 3], objects: &[Object]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if dir[1] > 0.0 {
        let t = CAMERA_HEIGHT / dir[1];
        let (gx, gz) = (dir[0] * t, dir[2] * t);
        let checker = ((gx.floor() + gz.floor()) as i64).rem_euclid(2) as f64;
        let g = 0.35 + 0.15 * checker;
        best = Some(Hit { t, normal: [0.0, -1.0, 0.0], color: [g, g, g * 0.9] });
    }
    for o in objects {
        if let Some((t, normal)) = intersect(&o.shape, dir) {
            if best.as_ref().is_none_or(|b| t < b.t) {
                best = Some(Hit { t, normal, color: o.color });
            }
        }
    }
    best
}

fn render(height: usize, width: usize, objects: &[Object]) -> (Vec<f64>, Vec<f64>) {
    let f = 0.9 * width as f64;
    let (cx, cy) = (width as f64 / 2.0, 0.35 * height as f64);
    let light = {
        let l = [-0.4, -1.0, -0.5];
        let n = dot(l, l).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let plane = height * width;
    let mut depth = vec![0.0; plane];
    let mut rgb = vec![0.0; 3 * plane];
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            let dir = [(u as f64 + 0.5 - cx) / f, (v as f64 + 0.5 - cy) / f, 1.0];
            match trace(dir, objects) {
                Some(hit) if hit.t <= MAX_DEPTH => {
                    depth[i] = hit.t.max(MIN_DEPTH);
                    let shade = 0.25 + 0.75 * dot(hit.normal, light).max(0.0);
                    let fog = 1.0 - 0.4 * hit.t / MAX_DEPTH;
                    for c in 0..3 {
                        rgb[c * plane + i] = (hit.color[c] * shade * fog).clamp(0.0, 1.0);
                    }
                }
                _ => {
                    depth[i] = MAX_DEPTH;
                    let sky = 0.6 + 0.3 * (v as f64 / cy.max(1.0)).min(1.0);
                    rgb[i] = 0.55 * sky;
                    rgb[plane + i] = 0.7 * sky;
                    rgb[2 * plane + i] = sky.min(1.0);
                }
            }
        }
    }
    (depth, rgb)
}

fn check_size(height: usize, width: usize) -> Result<()> {
    if height < 32 || width < 32 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
        return Err(Error::Config(format!("synthetic scenes need sides >= 32 divisible by 8, got {height}x{width}")));
    }
    Ok(())
}

fn sample_from(id: String, height: usize, width: usize, objects: &[Object]) -> Result<SceneSample> {
    let (depth, rgb) = render(height, width, objects);
    let dense = DepthMap::dense(height, width, depth)?;
    Ok(SceneSample {
        id,
        image: RgbImage::new(height, width, rgb)?,
        sparse: DepthMap::empty(height, width),
        dense_gt: dense,
    })
}

/// Deterministic scene for `seed`. The sparse map is left empty; see
/// [`crate::data::sparsify`].
pub fn synth_scene(seed: u64, height: usize, width: usize) -> Result<SceneSample> {
    check_size(height, width)?;
    let mut rng = stream(seed, &[purpose::SYNTH]);
    let objects = random_objects(&mut rng);
    sample_from(format!("scene_{seed:06}"), height, width, &objects)
}

/// The bare ground plane, no objects.
pub fn ground_plane_scene(height: usize, width: usize) -> Result<SceneSample> {
    check_size(height, width)?;
    sample_from("ground".into(), height, width, &[])
}
