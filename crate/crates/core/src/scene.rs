//! Synthetic ground truth: analytic SDF scenes with procedural textures,
//! rendered to calibrated images, depth maps, and surface point clouds.
//!
//! Stands in for captured datasets so the whole pipeline can be verified
//! against exact geometry on one machine.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::Aabb;
use crate::camera::{pixel_ray, ray_dir_z, Camera, Ray};
use crate::eval::PointCloud;
use crate::img::ImageBuffer;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
}

impl Primitive {
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius } => {
                (p - Vector3::from(*center)).norm() - radius
            }
            Primitive::Box {
                center,
                half_extents,
            } => {
                let q = (p - Vector3::from(*center)).abs() - Vector3::from(*half_extents);
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    /// Smooth 3D value noise blended between two colors.
    ValueNoise {
        /// Cycles per scene diameter.
        frequency: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
        seed: u64,
    },
    Checker {
        frequency: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub texture: Texture,
    pub bounds: Aabb,
}

fn lattice_hash(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    // SplitMix64 over the packed lattice coordinates.
    let mut h = (ix as u64)
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((iy as u64).wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add((iz as u64).wrapping_mul(0x94D049BB133111EB))
        .wrapping_add(seed.wrapping_mul(0xD6E8FEB86659FD93));
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58476D1CE4E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D049BB133111EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let ix = p.x.floor() as i64;
    let iy = p.y.floor() as i64;
    let iz = p.z.floor() as i64;
    let fx = smoothstep(p.x - ix as f64);
    let fy = smoothstep(p.y - iy as f64);
    let fz = smoothstep(p.z - iz as f64);
    let mut acc = 0.0;
    for dz in 0..2i64 {
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let w = (if dx == 0 { 1.0 - fx } else { fx })
                    * (if dy == 0 { 1.0 - fy } else { fy })
                    * (if dz == 0 { 1.0 - fz } else { fz });
                acc += w * lattice_hash(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

impl AnalyticScene {
    pub fn diameter(&self) -> f64 {
        self.bounds.diameter()
    }

    /// Procedural surface color at a 3D point, in [0, 1] per channel.
    pub fn texture_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        let diam = self.diameter();
        match &self.texture {
            Texture::ValueNoise {
                frequency,
                color_a,
                color_b,
                seed,
            } => {
                let q = p * (frequency / diam);
                // Two octaves; the second adds detail for matching.
                let n = 0.65 * value_noise(&q, *seed) + 0.35 * value_noise(&(q * 2.0), seed ^ 0xABCD);
                let mut c = [0.0; 3];
                for i in 0..3 {
                    c[i] = color_a[i] + (color_b[i] - color_a[i]) * n;
                }
                c
            }
            Texture::Checker {
                frequency,
                color_a,
                color_b,
            } => {
                let q = p * (frequency / diam);
                let parity = (q.x.floor() + q.y.floor() + q.z.floor()) as i64 & 1;
                if parity == 0 {
                    *color_a
                } else {
                    *color_b
                }
            }
        }
    }
}

/// Signed distance to the scene: negative inside, positive outside.
/// Unions are pointwise minima.
pub fn sdf_eval(scene: &AnalyticScene, point: &Vector3<f64>) -> f64 {
    scene
        .primitives
        .iter()
        .map(|p| p.sdf(point))
        .fold(f64::INFINITY, f64::min)
}

/// Central-difference SDF gradient.
pub fn sdf_gradient(scene: &AnalyticScene, point: &Vector3<f64>, h: f64) -> Vector3<f64> {
    let mut g = Vector3::zeros();
    for i in 0..3 {
        let mut a = *point;
        let mut b = *point;
        a[i] += h;
        b[i] -= h;
        g[i] = (sdf_eval(scene, &a) - sdf_eval(scene, &b)) / (2.0 * h);
    }
    g
}

pub const SPHERE_TRACE_MAX_ITERS: usize = 256;

/// March the ray until |sdf| < tol. Returns the arc length `t` of the
/// hit point; convert to camera-frame depth with
/// [`crate::camera::ray_dir_z`]. `None` means the ray left the scene
/// bounds or ran out of iterations.
pub fn sphere_trace(scene: &AnalyticScene, ray: &Ray, tol: f64) -> Option<f64> {
    let (t_enter, t_exit) = scene.bounds.clip_ray(ray)?;
    let mut t = t_enter.max(ray.t_near);
    for _ in 0..SPHERE_TRACE_MAX_ITERS {
        let d = sdf_eval(scene, &ray.point_at(t));
        if d.abs() < tol {
            return Some(t);
        }
        t += d.max(tol * 0.5);
        if t > t_exit {
            return None;
        }
    }
    None
}

/// Default sphere-trace tolerance: 1e-5 of the scene diameter.
pub fn default_trace_tol(scene: &AnalyticScene) -> f64 {
    1e-5 * scene.diameter()
}

/// Render one calibrated view: Lambertian-shaded color and a z-depth
/// map (0 where the ray misses).
pub fn render_ground_truth(
    scene: &AnalyticScene,
    camera: &Camera,
    light_dir: &Vector3<f64>,
) -> (ImageBuffer, ImageBuffer) {
    let tol = default_trace_tol(scene);
    let light = light_dir.normalize();
    let grad_h = 1e-5 * scene.diameter();
    let mut color = ImageBuffer::new(camera.width, camera.height, 3);
    let mut depth = ImageBuffer::new(camera.width, camera.height, 1);
    let t_far = (camera.center() - scene.bounds.center()).norm() + scene.diameter();
    for y in 0..camera.height {
        for x in 0..camera.width {
            let pixel = Vector2::new(x as f64, y as f64);
            let ray = pixel_ray(camera, &pixel, 1e-6, t_far).expect("valid range");
            if let Some(t) = sphere_trace(scene, &ray, tol) {
                let p = ray.point_at(t);
                let n = sdf_gradient(scene, &p, grad_h).normalize();
                let lambert = n.dot(&light).max(0.0);
                let shade = 0.15 + 0.85 * lambert;
                let tex = scene.texture_at(&p);
                for c in 0..3 {
                    color.set(x, y, c, (tex[c] * shade).clamp(0.0, 1.0));
                }
                depth.set(x, y, 0, t * ray_dir_z(camera, &ray));
            }
        }
    }
    (color, depth)
}

/// Draw `n` points on the zero level set: rejection sampling in bounds
/// followed by Newton projection along the SDF gradient.
pub fn sample_surface<R: Rng>(scene: &AnalyticScene, n: usize, rng: &mut R) -> PointCloud {
    let threshold = 1e-4 * scene.diameter();
    let grad_h = 1e-6 * scene.diameter();
    let lo = scene.bounds.min_v();
    let ext = scene.bounds.extents();
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let mut p = Vector3::new(
            lo.x + rng.gen::<f64>() * ext.x,
            lo.y + rng.gen::<f64>() * ext.y,
            lo.z + rng.gen::<f64>() * ext.z,
        );
        // Only start near the surface so projections stay well-behaved.
        if sdf_eval(scene, &p).abs() > 0.25 * scene.diameter() {
            continue;
        }
        let mut ok = false;
        for _ in 0..50 {
            let d = sdf_eval(scene, &p);
            if d.abs() < threshold {
                ok = true;
                break;
            }
            let g = sdf_gradient(scene, &p, grad_h);
            let g2 = g.norm_squared();
            if g2 < 1e-12 {
                break;
            }
            p -= g * (d / g2);
        }
        if ok && scene.bounds.contains(&p) {
            points.push(p);
        }
    }
    PointCloud {
        points,
        colors: None,
    }
}

/// Cameras evenly spaced on a horizontal arc, all looking at `center`.
/// The default 60 degree arc with three cameras gives 30 degree pairwise
/// baselines, the wide-baseline sparse-view setting.
#[allow(clippy::too_many_arguments)]
pub fn arc_cameras(
    n: usize,
    radius: f64,
    center: Vector3<f64>,
    fov_deg: f64,
    width: usize,
    height: usize,
    arc_deg: f64,
) -> Vec<Camera> {
    assert!(n >= 2, "arc_cameras needs at least two views");
    let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let arc = arc_deg.to_radians();
    (0..n)
        .map(|i| {
            let theta = -arc / 2.0 + arc * i as f64 / (n as f64 - 1.0);
            let eye = center + Vector3::new(radius * theta.sin(), 0.0, -radius * theta.cos());
            Camera::look_at(
                eye,
                center,
                Vector3::new(0.0, 1.0, 0.0),
                f,
                f,
                cx,
                cy,
                width,
                height,
            )
        })
        .collect()
}

/// On-disk scene description consumed by the `gen-scene` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub primitives: Vec<Primitive>,
    pub texture: Texture,
    pub bounds: Aabb,
    pub light_dir: [f64; 3],
    pub cameras: ArcParams,
    /// [d_min, d_max] plane-sweep range; derived from the bounds and
    /// camera ring when omitted.
    #[serde(default)]
    pub depth_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArcParams {
    pub n: usize,
    pub radius: f64,
    pub center: [f64; 3],
    pub fov_deg: f64,
    #[serde(default = "default_arc_deg")]
    pub arc_deg: f64,
}

fn default_arc_deg() -> f64 {
    60.0
}

impl SceneFile {
    pub fn scene(&self) -> AnalyticScene {
        AnalyticScene {
            primitives: self.primitives.clone(),
            texture: self.texture.clone(),
            bounds: self.bounds,
        }
    }

    /// Plane-sweep depth range: explicit if given, otherwise the camera
    /// ring radius minus/plus the bounds radius.
    pub fn depth_range(&self) -> [f64; 2] {
        if let Some(r) = self.depth_range {
            return r;
        }
        let scene_center = self.bounds.center();
        let look_center = Vector3::from(self.cameras.center);
        let off = (scene_center - look_center).norm();
        let r = 0.5 * self.bounds.diameter() + off;
        [
            (self.cameras.radius - r).max(1e-3 * self.cameras.radius),
            self.cameras.radius + r,
        ]
    }
}
