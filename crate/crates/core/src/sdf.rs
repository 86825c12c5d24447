//! Differentiable voxel-grid SDF scene representation with volume
//! rendering of implicit surfaces.
//!
//! Geometry is a dense grid of signed-distance values (negative inside)
//! with RGB color per vertex and a single learnable density scale beta.
//! Density comes from the Laplace CDF transform of the signed distance;
//! rendering composites densities into per-sample weights whose sum plus
//! the residual transmittance telescopes to exactly one. The backward
//! pass is hand-derived reverse mode through the weight recurrence, the
//! density transform, and trilinear interpolation.

use nalgebra::{Vector2, Vector3};
use rand::Rng;

use crate::bounds::Aabb;
use crate::camera::{pixel_ray, ray_dir_z, Camera, Ray};
use crate::img::ImageBuffer;

/// Minimum beta as a fraction of the scene diameter.
pub const BETA_MIN_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct VoxelSdfGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub bounds: Aabb,
    /// Signed distance per vertex, x-major (x fastest).
    pub sdf: Vec<f64>,
    /// RGB per vertex, x-major, channel-interleaved.
    pub color: Vec<f64>,
    /// Laplace density scale; alpha = 1/beta.
    pub beta: f64,
}

impl VoxelSdfGrid {
    pub fn vertex_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn vertex_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny + iy) * self.nx + ix
    }

    pub fn vertex_pos(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let lo = self.bounds.min_v();
        let ext = self.bounds.extents();
        Vector3::new(
            lo.x + ext.x * ix as f64 / (self.nx - 1) as f64,
            lo.y + ext.y * iy as f64 / (self.ny - 1) as f64,
            lo.z + ext.z * iz as f64 / (self.nz - 1) as f64,
        )
    }

    /// Grid spacing per axis.
    pub fn cell_size(&self) -> Vector3<f64> {
        let ext = self.bounds.extents();
        Vector3::new(
            ext.x / (self.nx - 1) as f64,
            ext.y / (self.ny - 1) as f64,
            ext.z / (self.nz - 1) as f64,
        )
    }

    pub fn beta_min(&self) -> f64 {
        BETA_MIN_FRACTION * self.bounds.diameter()
    }

    pub fn alpha(&self) -> f64 {
        1.0 / self.beta
    }
}

/// Grid initialized to the SDF of a sphere at the bounds center, gray
/// color, and beta at a tenth of the scene diameter.
pub fn init_sphere(
    resolution: (usize, usize, usize),
    bounds: Aabb,
    init_radius: f64,
) -> VoxelSdfGrid {
    let (nx, ny, nz) = resolution;
    assert!(nx >= 2 && ny >= 2 && nz >= 2);
    let ext = bounds.extents();
    assert!(
        init_radius < 0.5 * ext.x.min(ext.y).min(ext.z),
        "init sphere must fit inside the bounds"
    );
    let mut grid = VoxelSdfGrid {
        nx,
        ny,
        nz,
        bounds,
        sdf: vec![0.0; nx * ny * nz],
        color: vec![0.5; nx * ny * nz * 3],
        beta: 0.1 * bounds.diameter(),
    };
    let center = bounds.center();
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let p = grid.vertex_pos(ix, iy, iz);
                let vi = grid.vertex_index(ix, iy, iz);
                grid.sdf[vi] = (p - center).norm() - init_radius;
            }
        }
    }
    grid
}

/// One trilinear lookup with enough retained state to route gradients
/// back to the 8 touched vertices.
#[derive(Debug, Clone, Copy)]
pub struct GridSample {
    pub sdf: f64,
    /// Raw (unclamped) interpolated color.
    pub color_raw: [f64; 3],
    /// False for points outside the bounds; those are forced exterior
    /// with zero gradient.
    pub inside: bool,
    pub ix: usize,
    pub iy: usize,
    pub iz: usize,
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
}

impl GridSample {
    /// Color clamped to [0, 1] as used by the renderer.
    pub fn color(&self) -> [f64; 3] {
        [
            self.color_raw[0].clamp(0.0, 1.0),
            self.color_raw[1].clamp(0.0, 1.0),
            self.color_raw[2].clamp(0.0, 1.0),
        ]
    }

    /// Trilinear weights of the 8 cell corners, in (dz, dy, dx) order.
    pub fn corner_weights(&self) -> [f64; 8] {
        let (fx, fy, fz) = (self.fx, self.fy, self.fz);
        let mut w = [0.0; 8];
        for (i, wi) in w.iter_mut().enumerate() {
            let dx = i & 1;
            let dy = (i >> 1) & 1;
            let dz = (i >> 2) & 1;
            *wi = (if dx == 0 { 1.0 - fx } else { fx })
                * (if dy == 0 { 1.0 - fy } else { fy })
                * (if dz == 0 { 1.0 - fz } else { fz });
        }
        w
    }
}

/// Trilinear interpolation of SDF and color at a world point. Points
/// outside the bounds return a forced-exterior SDF (distance to the box
/// plus one) and gray color, with no gradient to any parameter.
pub fn sample_grid(grid: &VoxelSdfGrid, point: &Vector3<f64>) -> GridSample {
    if !grid.bounds.contains(point) {
        return GridSample {
            sdf: grid.bounds.distance(point) + 1.0,
            color_raw: [0.5, 0.5, 0.5],
            inside: false,
            ix: 0,
            iy: 0,
            iz: 0,
            fx: 0.0,
            fy: 0.0,
            fz: 0.0,
        };
    }
    let lo = grid.bounds.min_v();
    let cs = grid.cell_size();
    let gx = (point.x - lo.x) / cs.x;
    let gy = (point.y - lo.y) / cs.y;
    let gz = (point.z - lo.z) / cs.z;
    let ix = (gx.floor() as usize).min(grid.nx - 2);
    let iy = (gy.floor() as usize).min(grid.ny - 2);
    let iz = (gz.floor() as usize).min(grid.nz - 2);
    let fx = (gx - ix as f64).clamp(0.0, 1.0);
    let fy = (gy - iy as f64).clamp(0.0, 1.0);
    let fz = (gz - iz as f64).clamp(0.0, 1.0);
    let mut s = GridSample {
        sdf: 0.0,
        color_raw: [0.0; 3],
        inside: true,
        ix,
        iy,
        iz,
        fx,
        fy,
        fz,
    };
    let w = s.corner_weights();
    for (i, wi) in w.iter().enumerate() {
        let vi = grid.vertex_index(ix + (i & 1), iy + ((i >> 1) & 1), iz + ((i >> 2) & 1));
        s.sdf += wi * grid.sdf[vi];
        for c in 0..3 {
            s.color_raw[c] += wi * grid.color[vi * 3 + c];
        }
    }
    s
}

/// Laplace transform from signed distance to density. The argument `s`
/// follows the convention "non-negative inside the surface": interior
/// points get density approaching alpha = 1/beta, exterior points get
/// density approaching zero. The grid stores distances negative inside,
/// so callers feed the negated grid value (see [`density_from_sdf`]).
pub fn laplace_density(s: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let alpha = 1.0 / beta;
    if s <= 0.0 {
        0.5 * (s / beta).exp() * alpha
    } else {
        (1.0 - 0.5 * (-s / beta).exp()) * alpha
    }
}

/// d(sigma)/ds and d(sigma)/d(beta) of [`laplace_density`].
pub fn laplace_density_grads(s: f64, beta: f64) -> (f64, f64) {
    let b2 = beta * beta;
    let b3 = b2 * beta;
    if s <= 0.0 {
        let e = (s / beta).exp();
        (e / (2.0 * b2), -e * (s + beta) / (2.0 * b3))
    } else {
        let e = (-s / beta).exp();
        (e / (2.0 * b2), -1.0 / b2 - e * (s - beta) / (2.0 * b3))
    }
}

/// Density at a grid sample: the grid is negative inside, the Laplace
/// transform wants non-negative inside, so the sign is flipped here.
pub fn density_from_sdf(sdf: f64, beta: f64) -> f64 {
    laplace_density(-sdf, beta)
}

/// Everything produced by rendering one ray, with the intermediates the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct RaySampleBatch {
    /// Sample parameters along the ray (arc length).
    pub t: Vec<f64>,
    /// Interval lengths; the last one extends to t_far.
    pub delta: Vec<f64>,
    pub samples: Vec<GridSample>,
    pub sigma: Vec<f64>,
    /// Transmittance at each sample (T_1 = 1).
    pub trans: Vec<f64>,
    pub weight: Vec<f64>,
    /// Transmittance left after the last sample.
    pub residual_trans: f64,
    /// Expected color.
    pub color: [f64; 3],
    /// Expected depth along the ray parameter: sum of w_i t_i.
    pub depth: f64,
}

/// Render a ray at explicit sample positions `ts` (strictly increasing,
/// inside [t_near, t_far]).
pub fn render_samples(grid: &VoxelSdfGrid, ray: &Ray, ts: &[f64]) -> RaySampleBatch {
    let n = ts.len();
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { ts[i + 1] } else { ray.t_far };
        delta.push(next - ts[i]);
    }
    let mut samples = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut trans = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut accum: f64 = 0.0; // sum of sigma_j * delta_j so far
    for i in 0..n {
        let s = sample_grid(grid, &ray.point_at(ts[i]));
        let sig = density_from_sdf(s.sdf, grid.beta);
        let t_i = (-accum).exp();
        let w = t_i * (1.0 - (-sig * delta[i]).exp());
        let c = s.color();
        for ch in 0..3 {
            color[ch] += w * c[ch];
        }
        depth += w * ts[i];
        samples.push(s);
        sigma.push(sig);
        trans.push(t_i);
        weight.push(w);
        accum += sig * delta[i];
    }
    RaySampleBatch {
        t: ts.to_vec(),
        delta,
        samples,
        sigma,
        trans,
        weight,
        residual_trans: (-accum).exp(),
        color,
        depth,
    }
}

/// Stratified sample positions: one uniform draw per equal sub-interval.
pub fn stratified_ts<R: Rng>(t_near: f64, t_far: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let step = (t_far - t_near) / n as f64;
    (0..n)
        .map(|i| t_near + (i as f64 + rng.gen::<f64>()) * step)
        .collect()
}

/// Midpoint sample positions (deterministic; used for depth maps).
pub fn midpoint_ts(t_near: f64, t_far: f64, n: usize) -> Vec<f64> {
    let step = (t_far - t_near) / n as f64;
    (0..n).map(|i| t_near + (i as f64 + 0.5) * step).collect()
}

/// Render a ray with stratified uniform sampling in [t_near, t_far].
pub fn render_ray<R: Rng>(
    grid: &VoxelSdfGrid,
    ray: &Ray,
    n_samples: usize,
    rng: &mut R,
) -> RaySampleBatch {
    assert!(n_samples >= 8, "need at least 8 samples per ray");
    let ts = stratified_ts(ray.t_near, ray.t_far, n_samples, rng);
    render_samples(grid, ray, &ts)
}

/// Upstream gradients flowing into one rendered ray.
#[derive(Debug, Clone, Default)]
pub struct RayUpstream {
    /// d(loss)/d(w_i); empty means zero.
    pub d_weight: Vec<f64>,
    /// d(loss)/d(expected color).
    pub d_color: [f64; 3],
    /// d(loss)/d(expected depth).
    pub d_depth: f64,
}

/// Gradient accumulator matching the grid's parameter layout.
#[derive(Debug, Clone)]
pub struct GridGrads {
    pub sdf: Vec<f64>,
    pub color: Vec<f64>,
    pub beta: f64,
}

impl GridGrads {
    pub fn zeros(grid: &VoxelSdfGrid) -> Self {
        GridGrads {
            sdf: vec![0.0; grid.sdf.len()],
            color: vec![0.0; grid.color.len()],
            beta: 0.0,
        }
    }
}

/// Exact reverse-mode gradients of one rendered ray with respect to the
/// grid SDF values, colors, and beta. Contributions accumulate
/// additively into `grads`.
pub fn backward(
    grid: &VoxelSdfGrid,
    batch: &RaySampleBatch,
    upstream: &RayUpstream,
    grads: &mut GridGrads,
) {
    let n = batch.t.len();
    if n == 0 {
        return;
    }
    // Total gradient on each rendering weight: direct supervision plus
    // the expected-color and expected-depth paths.
    let mut dw = vec![0.0; n];
    for i in 0..n {
        if !upstream.d_weight.is_empty() {
            dw[i] += upstream.d_weight[i];
        }
        let c = batch.samples[i].color();
        for ch in 0..3 {
            dw[i] += upstream.d_color[ch] * c[ch];
        }
        dw[i] += upstream.d_depth * batch.t[i];
    }

    // With a_i = sigma_i * delta_i and A_i its prefix sum,
    // w_i = exp(-A_{i-1}) - exp(-A_i), so
    // dL/da_j = sum_{i>=j} dw_i exp(-A_i) - sum_{i>j} dw_i exp(-A_{i-1}).
    // E_i = exp(-A_i) is trans[i+1] (or the residual for the last one).
    let e = |i: usize| {
        if i + 1 < n {
            batch.trans[i + 1]
        } else {
            batch.residual_trans
        }
    };
    let mut s1 = 0.0; // sum_{i>=j} dw_i E_i
    let mut s2 = 0.0; // sum_{i>j} dw_i E_{i-1}
    let mut da = vec![0.0; n];
    for j in (0..n).rev() {
        s1 += dw[j] * e(j);
        da[j] = s1 - s2;
        s2 += dw[j] * batch.trans[j];
    }

    for i in 0..n {
        let sample = &batch.samples[i];
        // Color gradient: dC/dc_i = w_i, gated by the render-time clamp.
        let w_i = batch.weight[i];
        let dc = [
            upstream.d_color[0] * w_i,
            upstream.d_color[1] * w_i,
            upstream.d_color[2] * w_i,
        ];
        let d_sigma = da[i] * batch.delta[i];
        // sigma = laplace(-sdf, beta); chain through the sign flip.
        let (ds, db) = laplace_density_grads(-sample.sdf, grid.beta);
        grads.beta += d_sigma * db;
        if !sample.inside {
            continue;
        }
        let d_sdf = -d_sigma * ds;
        let w8 = sample.corner_weights();
        for (k, wk) in w8.iter().enumerate() {
            let vi = grid.vertex_index(
                sample.ix + (k & 1),
                sample.iy + ((k >> 1) & 1),
                sample.iz + ((k >> 2) & 1),
            );
            grads.sdf[vi] += d_sdf * wk;
            for ch in 0..3 {
                let raw = sample.color_raw[ch];
                if (0.0..=1.0).contains(&raw) {
                    grads.color[vi * 3 + ch] += dc[ch] * wk;
                }
            }
        }
    }
}

/// Expected-depth map with per-pixel confidence 1 - residual
/// transmittance; depth is marked invalid (0) below 0.5 confidence.
/// Deterministic midpoint sampling.
pub fn render_depth_map(
    grid: &VoxelSdfGrid,
    camera: &Camera,
    n_samples: usize,
    depth_range: [f64; 2],
) -> (ImageBuffer, ImageBuffer) {
    let mut depth = ImageBuffer::new(camera.width, camera.height, 1);
    let mut conf = ImageBuffer::new(camera.width, camera.height, 1);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray = camera_ray(camera, x as f64, y as f64, depth_range);
            let ts = midpoint_ts(ray.t_near, ray.t_far, n_samples);
            let batch = render_samples(grid, &ray, &ts);
            let opacity = 1.0 - batch.residual_trans;
            if opacity >= 0.5 {
                depth.set(x, y, 0, batch.depth * ray_dir_z(camera, &ray));
                conf.set(x, y, 0, opacity);
            }
        }
    }
    (depth, conf)
}

/// Render a full color image from the grid (midpoint sampling).
pub fn render_image(
    grid: &VoxelSdfGrid,
    camera: &Camera,
    n_samples: usize,
    depth_range: [f64; 2],
) -> ImageBuffer {
    let mut img = ImageBuffer::new(camera.width, camera.height, 3);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray = camera_ray(camera, x as f64, y as f64, depth_range);
            let ts = midpoint_ts(ray.t_near, ray.t_far, n_samples);
            let batch = render_samples(grid, &ray, &ts);
            for c in 0..3 {
                img.set(x, y, c, batch.color[c].clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Pixel ray whose [t_near, t_far] covers camera-frame depths
/// [d_min, d_max].
pub fn camera_ray(camera: &Camera, px: f64, py: f64, depth_range: [f64; 2]) -> Ray {
    let pixel = Vector2::new(px, py);
    let ray = pixel_ray(camera, &pixel, 1e-6, 1.0).expect("valid range");
    let dz = ray_dir_z(camera, &ray);
    Ray {
        t_near: depth_range[0] / dz,
        t_far: depth_range[1] / dz,
        ..ray
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{arc_cameras, default_trace_tol, sphere_trace, AnalyticScene, Primitive, Texture};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_bounds() -> Aabb {
        Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0))
    }

    fn sphere_grid(n: usize, radius: f64) -> VoxelSdfGrid {
        init_sphere((n, n, n), unit_bounds(), radius)
    }

    #[test]
    fn init_sphere_exact_sdf_values() {
        let grid = sphere_grid(33, 0.6);
        // Vertex (16,16,16) is the center; (32,16,16) is (1,0,0).
        assert_relative_eq!(grid.sdf[grid.vertex_index(16, 16, 16)], -0.6);
        assert_relative_eq!(grid.sdf[grid.vertex_index(32, 16, 16)], 0.4);
        assert_relative_eq!(grid.sdf[grid.vertex_index(0, 0, 0)], 3f64.sqrt() - 0.6);
        assert_relative_eq!(grid.beta, 0.1 * unit_bounds().diameter());
        assert!(grid.color.iter().all(|&c| c == 0.5));
    }

    #[test]
    fn sample_grid_matches_vertices_and_interpolates() {
        let grid = sphere_grid(17, 0.5);
        let s = sample_grid(&grid, &grid.vertex_pos(4, 9, 12));
        assert_relative_eq!(
            s.sdf,
            grid.sdf[grid.vertex_index(4, 9, 12)],
            epsilon = 1e-12
        );
        // Midpoint of an edge along x: average of the two endpoints.
        let a = grid.vertex_pos(4, 9, 12);
        let b = grid.vertex_pos(5, 9, 12);
        let mid = sample_grid(&grid, &(0.5 * (a + b)));
        assert_relative_eq!(
            mid.sdf,
            0.5 * (grid.sdf[grid.vertex_index(4, 9, 12)]
                + grid.sdf[grid.vertex_index(5, 9, 12)]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sample_grid_outside_is_forced_exterior() {
        let grid = sphere_grid(9, 0.5);
        let s = sample_grid(&grid, &Vector3::new(0.0, 0.0, 2.5));
        assert!(!s.inside);
        assert_relative_eq!(s.sdf, 1.5 + 1.0);
        assert_eq!(s.color_raw, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn laplace_density_surface_and_limits() {
        for beta in [0.01, 0.1, 1.0] {
            let alpha = 1.0 / beta;
            // Continuity and the half-alpha value at the surface.
            assert_relative_eq!(laplace_density(0.0, beta), 0.5 * alpha);
            assert_relative_eq!(
                laplace_density(-1e-12, beta),
                laplace_density(1e-12, beta),
                max_relative = 1e-9
            );
            // Deep inside (argument convention: positive inside) the
            // density saturates at alpha; far outside it vanishes.
            assert_relative_eq!(laplace_density(100.0 * beta, beta), alpha, max_relative = 1e-12);
            assert!(laplace_density(-100.0 * beta, beta) < 1e-40 * alpha);
            // Monotone increasing in s.
            let mut prev = 0.0;
            for i in -20..=20 {
                let v = laplace_density(i as f64 * 0.1 * beta, beta);
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn laplace_grads_match_finite_differences() {
        let h = 1e-6;
        for &(s, beta) in &[(-0.3, 0.2), (-0.01, 0.05), (0.0, 0.1), (0.02, 0.05), (0.5, 0.3)] {
            let (ds, db) = laplace_density_grads(s, beta);
            let fd_s = (laplace_density(s + h, beta) - laplace_density(s - h, beta)) / (2.0 * h);
            let fd_b = (laplace_density(s, beta + h) - laplace_density(s, beta - h)) / (2.0 * h);
            assert_relative_eq!(ds, fd_s, max_relative = 1e-5, epsilon = 1e-8);
            assert_relative_eq!(db, fd_b, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    #[test]
    fn empty_space_renders_nothing() {
        // A grid whose SDF is uniformly far outside: zero opacity and
        // full residual transmittance.
        let mut grid = sphere_grid(9, 0.5);
        for v in grid.sdf.iter_mut() {
            *v = 1e6;
        }
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -0.9),
            direction: Vector3::new(0.0, 0.0, 1.0),
            t_near: 0.0,
            t_far: 1.8,
        };
        let batch = render_samples(&grid, &ray, &midpoint_ts(0.0, 1.8, 32));
        assert_relative_eq!(batch.residual_trans, 1.0, epsilon = 1e-12);
        assert!(batch.weight.iter().all(|&w| w.abs() < 1e-12));
        assert!(batch.color.iter().all(|&c| c.abs() < 1e-12));
    }

    #[test]
    fn constant_density_matches_geometric_series() {
        // Constant SDF value -> constant sigma; with equal deltas the
        // weights follow a geometric series in closed form.
        let s0 = -0.05;
        let mut grid = sphere_grid(9, 0.5);
        for v in grid.sdf.iter_mut() {
            *v = s0;
        }
        let sigma = density_from_sdf(s0, grid.beta);
        let n = 24;
        let (t_near, t_far) = (0.1, 1.7);
        let delta = (t_far - t_near) / n as f64;
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -0.9),
            direction: Vector3::new(0.0, 0.0, 1.0),
            t_near,
            t_far,
        };
        // Equal-spaced samples starting at t_near give delta_i = delta
        // for every interval, including the last one (it extends to
        // t_far).
        let ts: Vec<f64> = (0..n).map(|i| t_near + i as f64 * delta).collect();
        let batch = render_samples(&grid, &ray, &ts);
        let decay = (-sigma * delta).exp();
        for i in 0..n {
            let expected = decay.powi(i as i32) * (1.0 - decay);
            assert_relative_eq!(batch.weight[i], expected, max_relative = 1e-9);
        }
        assert_relative_eq!(batch.residual_trans, decay.powi(n as i32), max_relative = 1e-9);
    }

    proptest! {
        #[test]
        fn weights_plus_residual_is_one(
            seed in 0u64..500,
            radius in 0.2f64..0.8,
            n in 8usize..64,
        ) {
            let grid = sphere_grid(17, radius);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let origin = Vector3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                -2.5,
            );
            let dir = (Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                2.0,
            ))
            .normalize();
            let ray = Ray { origin, direction: dir, t_near: 0.2, t_far: 4.0 };
            let batch = render_ray(&grid, &ray, n, &mut rng);
            let total: f64 = batch.weight.iter().sum::<f64>() + batch.residual_trans;
            prop_assert!((total - 1.0).abs() < 1e-6, "total = {total}");
            // Transmittance is non-increasing and weights non-negative.
            for i in 1..n {
                prop_assert!(batch.trans[i] <= batch.trans[i - 1] + 1e-15);
            }
            prop_assert!(batch.weight.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn sharp_grid_depth_matches_sphere_trace() {
        let mut grid = sphere_grid(65, 0.6);
        grid.beta = grid.beta_min(); // near-surface densities become sharp
        let scene = AnalyticScene {
            primitives: vec![Primitive::Sphere { center: [0.0; 3], radius: 0.6 }],
            texture: Texture::Checker { frequency: 4.0, color_a: [0.0; 3], color_b: [1.0; 3] },
            bounds: unit_bounds(),
        };
        let tol = default_trace_tol(&scene);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 200 {
            let dir = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let offset = Vector3::new(
                (rng.gen::<f64>() - 0.5) * 0.6,
                (rng.gen::<f64>() - 0.5) * 0.6,
                (rng.gen::<f64>() - 0.5) * 0.6,
            );
            let ray = Ray {
                origin: -dir * 2.0 + offset,
                direction: dir,
                t_near: 0.5,
                t_far: 3.5,
            };
            let Some(t_hit) = sphere_trace(&scene, &ray, tol) else { continue };
            // Skip grazing hits where trilinear aliasing dominates.
            let p = ray.point_at(t_hit);
            if p.normalize().dot(&-dir) < 0.5 {
                continue;
            }
            let batch = render_samples(&grid, &ray, &midpoint_ts(ray.t_near, ray.t_far, 512));
            assert!(1.0 - batch.residual_trans > 0.99);
            // Expected depth within a voxel of the analytic hit.
            let voxel = grid.cell_size().x;
            assert!(
                (batch.depth - t_hit).abs() < 1.5 * voxel,
                "depth {} vs trace {}",
                batch.depth,
                t_hit
            );
            checked += 1;
        }
    }

    #[test]
    fn silhouette_matches_analytic_sphere() {
        let mut grid = sphere_grid(65, 0.6);
        grid.beta = grid.beta_min();
        let scene = AnalyticScene {
            primitives: vec![Primitive::Sphere { center: [0.0; 3], radius: 0.6 }],
            texture: Texture::Checker { frequency: 4.0, color_a: [0.0; 3], color_b: [1.0; 3] },
            bounds: unit_bounds(),
        };
        let cam = arc_cameras(2, 2.5, Vector3::zeros(), 45.0, 64, 64, 10.0).remove(0);
        let (depth, _) = render_depth_map(&grid, &cam, 256, [1.0, 4.0]);
        let tol = default_trace_tol(&scene);
        let mut inter = 0;
        let mut union = 0;
        for y in 0..64 {
            for x in 0..64 {
                let ray = pixel_ray(&cam, &Vector2::new(x as f64, y as f64), 0.5, 5.0).unwrap();
                let gt_hit = sphere_trace(&scene, &ray, tol).is_some();
                let grid_hit = depth.get(x, y, 0) > 0.0;
                if gt_hit && grid_hit {
                    inter += 1;
                }
                if gt_hit || grid_hit {
                    union += 1;
                }
            }
        }
        assert!(union > 100);
        let iou = inter as f64 / union as f64;
        assert!(iou > 0.9, "silhouette IoU {iou}");
    }

    #[test]
    fn render_depth_map_empty_grid_is_invalid() {
        let mut grid = sphere_grid(9, 0.5);
        for v in grid.sdf.iter_mut() {
            *v = 1e6;
        }
        let cam = arc_cameras(2, 2.5, Vector3::zeros(), 45.0, 16, 12, 10.0).remove(0);
        let (depth, conf) = render_depth_map(&grid, &cam, 32, [1.0, 4.0]);
        assert!(depth.values.iter().all(|&d| d == 0.0));
        assert!(conf.values.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let grid = sphere_grid(9, 0.5);
        let ray = Ray {
            origin: Vector3::new(0.0, 0.1, -2.0),
            direction: Vector3::new(0.05, -0.02, 1.0).normalize(),
            t_near: 0.8,
            t_far: 3.2,
        };
        let batch = render_samples(&grid, &ray, &midpoint_ts(0.8, 3.2, 32));
        let mut grads = GridGrads::zeros(&grid);
        backward(&grid, &batch, &RayUpstream::default(), &mut grads);
        assert!(grads.sdf.iter().all(|&g| g == 0.0));
        assert!(grads.color.iter().all(|&g| g == 0.0));
        assert_eq!(grads.beta, 0.0);
    }

    /// Scalar loss for the finite-difference oracle: fixed upstream
    /// coefficients contracted with the ray outputs.
    fn fd_loss(grid: &VoxelSdfGrid, ray: &Ray, ts: &[f64], up: &RayUpstream) -> f64 {
        let batch = render_samples(grid, ray, ts);
        let mut loss = 0.0;
        for (i, &w) in batch.weight.iter().enumerate() {
            if !up.d_weight.is_empty() {
                loss += up.d_weight[i] * w;
            }
        }
        for c in 0..3 {
            loss += up.d_color[c] * batch.color[c];
        }
        loss += up.d_depth * batch.depth;
        loss
    }

    #[test]
    fn backward_matches_finite_differences() {
        let grid = sphere_grid(9, 0.45);
        let ray = Ray {
            origin: Vector3::new(0.1, -0.05, -2.0),
            direction: Vector3::new(-0.08, 0.03, 1.0).normalize(),
            t_near: 0.9,
            t_far: 3.1,
        };
        let ts = midpoint_ts(ray.t_near, ray.t_far, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let up = RayUpstream {
            d_weight: (0..48).map(|_| rng.gen::<f64>() - 0.5).collect(),
            d_color: [0.7, -0.3, 0.2],
            d_depth: 0.4,
        };
        let batch = render_samples(&grid, &ray, &ts);
        let mut grads = GridGrads::zeros(&grid);
        backward(&grid, &batch, &up, &mut grads);

        let h = 1e-5;
        // Beta.
        {
            let mut gp = grid.clone();
            gp.beta += h;
            let mut gm = grid.clone();
            gm.beta -= h;
            let fd = (fd_loss(&gp, &ray, &ts, &up) - fd_loss(&gm, &ray, &ts, &up)) / (2.0 * h);
            assert_relative_eq!(grads.beta, fd, max_relative = 1e-4, epsilon = 1e-10);
        }
        // A spread of SDF and color parameters, preferring touched ones.
        let touched: Vec<usize> = (0..grid.sdf.len())
            .filter(|&i| grads.sdf[i] != 0.0)
            .collect();
        assert!(touched.len() > 20, "ray should touch many vertices");
        for &vi in touched.iter().step_by(touched.len() / 12) {
            let mut gp = grid.clone();
            gp.sdf[vi] += h;
            let mut gm = grid.clone();
            gm.sdf[vi] -= h;
            let fd = (fd_loss(&gp, &ray, &ts, &up) - fd_loss(&gm, &ray, &ts, &up)) / (2.0 * h);
            assert_relative_eq!(grads.sdf[vi], fd, max_relative = 1e-4, epsilon = 1e-10);

            for c in 0..3 {
                let mut gp = grid.clone();
                gp.color[vi * 3 + c] += h;
                let mut gm = grid.clone();
                gm.color[vi * 3 + c] -= h;
                let fd =
                    (fd_loss(&gp, &ray, &ts, &up) - fd_loss(&gm, &ray, &ts, &up)) / (2.0 * h);
                assert_relative_eq!(grads.color[vi * 3 + c], fd, max_relative = 1e-4, epsilon = 1e-10);
            }
        }
        // An untouched vertex keeps a zero gradient.
        if let Some(vi) = (0..grid.sdf.len()).find(|i| !touched.contains(i)) {
            assert_eq!(grads.sdf[vi], 0.0);
        }
    }

    #[test]
    fn camera_ray_spans_requested_depths() {
        let cam = arc_cameras(2, 3.0, Vector3::zeros(), 50.0, 32, 24, 10.0).remove(0);
        let ray = camera_ray(&cam, 3.0, 17.0, [2.0, 4.0]);
        let dz = ray_dir_z(&cam, &ray);
        assert_relative_eq!(ray.t_near * dz, 2.0, epsilon = 1e-12);
        assert_relative_eq!(ray.t_far * dz, 4.0, epsilon = 1e-12);
    }
}
