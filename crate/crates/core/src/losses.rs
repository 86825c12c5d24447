//! Supervision terms: soft-consistency probability reweighting, the
//! generalized cross-entropy weight loss, photometric L1, the sparsity
//! regularizer for unsupervised rays, and the eikonal regularizer.

use nalgebra::Vector3;
use rand::Rng;

use crate::camera::{project, Camera};
use crate::error::{Error, Result};
use crate::mvs::ProbabilityVolume;
use crate::sdf::VoxelSdfGrid;

/// Rays whose summed consistency-weighted probability falls below this
/// carry no MVS supervision.
pub const SUPERVISION_THRESHOLD: f64 = 0.001;
/// Lower clamp on rendering weights before the q-1 power; the gradient
/// w^(q-1) diverges as w -> 0.
pub const WEIGHT_CLAMP_MIN: f64 = 1e-6;
/// Default denominator offset of the sparsity term.
pub const SPARSITY_EPSILON: f64 = 0.001;

/// Consistency-weighted supervision values P'(x) for the samples of one
/// ray.
#[derive(Debug, Clone)]
pub struct ConsistencyWeightedSamples {
    pub pprime: Vec<f64>,
    /// Total supervision mass along the ray.
    pub mass: f64,
    /// True when mass >= `SUPERVISION_THRESHOLD`.
    pub is_supervised: bool,
}

impl ConsistencyWeightedSamples {
    pub fn from_values(pprime: Vec<f64>) -> Self {
        let mass: f64 = pprime.iter().sum();
        ConsistencyWeightedSamples {
            pprime,
            mass,
            is_supervised: mass >= SUPERVISION_THRESHOLD,
        }
    }
}

/// Reference-volume probability at a 3D point on the ray through
/// `ref_pixel`, interpolated linearly along that pixel's hypothesis
/// axis (zero outside the range).
pub fn ref_probability_at(
    ref_pv: &ProbabilityVolume,
    ref_cam: &Camera,
    ref_pixel: (usize, usize),
    point: &Vector3<f64>,
) -> f64 {
    let z = ref_cam.to_camera(point).z;
    if z <= 0.0 {
        return 0.0;
    }
    ref_pv.interp_depth(ref_pixel.0, ref_pixel.1, z)
}

/// Source-volume probability at a 3D point: project into the source
/// view, interpolate along the hypothesis axis at the source-frame
/// depth, and bilinearly across the four neighboring pixels. Zero when
/// the projection leaves the image or the point is behind the camera.
pub fn src_probability_at(
    src_pv: &ProbabilityVolume,
    src_cam: &Camera,
    point: &Vector3<f64>,
) -> f64 {
    let Ok((px, z)) = project(src_cam, point) else {
        return 0.0;
    };
    let (w, h) = (src_pv.width, src_pv.height);
    if px.x < 0.0 || px.y < 0.0 || px.x > (w - 1) as f64 || px.y > (h - 1) as f64 {
        return 0.0;
    }
    let x0 = (px.x.floor() as usize).min(w - 1);
    let y0 = (px.y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = px.x - x0 as f64;
    let fy = px.y - y0 as f64;
    let mut acc = 0.0;
    for (xi, yi, wgt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if wgt > 0.0 {
            acc += wgt * src_pv.interp_depth(xi, yi, z);
        }
    }
    acc
}

/// P'(x) = P_ref(x) * sum_j P_src^j(x): the reference probability
/// reweighted by the summed source probabilities at the same location.
pub fn soft_consistency_at(
    ref_pv: &ProbabilityVolume,
    src_pvs: &[&ProbabilityVolume],
    ref_cam: &Camera,
    src_cams: &[&Camera],
    point: &Vector3<f64>,
    ref_pixel: (usize, usize),
) -> f64 {
    let p_ref = ref_probability_at(ref_pv, ref_cam, ref_pixel, point);
    if p_ref == 0.0 {
        return 0.0;
    }
    let mut src_sum = 0.0;
    for (pv, cam) in src_pvs.iter().zip(src_cams) {
        src_sum += src_probability_at(pv, cam, point);
    }
    p_ref * src_sum
}

/// Generalized cross-entropy weight loss
/// `L = sum_x (1 - w(x)^q)/q * P'(x)` with gradient
/// `dL/dw(x) = -w(x)^(q-1) * P'(x)`.
///
/// q = 1 is the MAE form; q -> 0 approaches cross entropy. Weights are
/// clamped to [1e-6, 1] before the power.
pub fn gce_weight_loss(
    weights: &[f64],
    pprime: &ConsistencyWeightedSamples,
    q: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidQ(q));
    }
    assert_eq!(weights.len(), pprime.pprime.len());
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for (i, (&w, &p)) in weights.iter().zip(&pprime.pprime).enumerate() {
        let wc = w.clamp(WEIGHT_CLAMP_MIN, 1.0);
        loss += (1.0 - wc.powf(q)) / q * p;
        grad[i] = -wc.powf(q - 1.0) * p;
    }
    Ok((loss, grad))
}

/// Plain cross-entropy weight loss `L = -sum_x ln(w(x)) * P'(x)`; the
/// no-GCE ablation.
pub fn ce_weight_loss(weights: &[f64], pprime: &ConsistencyWeightedSamples) -> (f64, Vec<f64>) {
    assert_eq!(weights.len(), pprime.pprime.len());
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    for (i, (&w, &p)) in weights.iter().zip(&pprime.pprime).enumerate() {
        let wc = w.clamp(WEIGHT_CLAMP_MIN, 1.0);
        loss += -wc.ln() * p;
        grad[i] = -p / wc;
    }
    (loss, grad)
}

/// Mean absolute error between rendered and target colors; gradient is
/// the sign, normalized by ray and channel count. Blurred-target mode is
/// realized by the caller supplying Gaussian-blurred target values.
pub fn photometric_loss(rendered: &[[f64; 3]], targets: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    assert_eq!(rendered.len(), targets.len());
    if rendered.is_empty() {
        return (0.0, Vec::new());
    }
    let norm = 1.0 / (rendered.len() * 3) as f64;
    let mut loss = 0.0;
    let mut grads = vec![[0.0; 3]; rendered.len()];
    for (i, (r, t)) in rendered.iter().zip(targets).enumerate() {
        for c in 0..3 {
            let d = r[c] - t[c];
            loss += d.abs() * norm;
            // Subgradient 0 at an exact match (signum(+0.0) is 1).
            grads[i][c] = if d == 0.0 { 0.0 } else { d.signum() * norm };
        }
    }
    (loss, grads)
}

/// Sparsity term for rays without MVS supervision: mean of
/// `1/(d_r + epsilon)`, pushing unsupervised geometry away from the
/// camera. Empty input gives zero.
pub fn sparsity_loss(depths: &[f64], epsilon: f64) -> (f64, Vec<f64>) {
    if depths.is_empty() {
        return (0.0, Vec::new());
    }
    let norm = 1.0 / depths.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; depths.len()];
    for (i, &d) in depths.iter().enumerate() {
        let denom = d + epsilon;
        loss += norm / denom;
        grads[i] = -norm / (denom * denom);
    }
    (loss, grads)
}

/// Eikonal loss at explicit points: mean of (|grad s| - 1)^2 with the
/// gradient of the trilinear interpolant computed analytically per cell.
/// Returns the loss and its gradient with respect to the grid SDF
/// values.
pub fn eikonal_loss_at(grid: &VoxelSdfGrid, points: &[Vector3<f64>]) -> (f64, Vec<f64>) {
    let mut dsdf = vec![0.0; grid.sdf.len()];
    if points.is_empty() {
        return (0.0, dsdf);
    }
    let cs = grid.cell_size();
    let norm = 1.0 / points.len() as f64;
    let mut loss = 0.0;
    for p in points {
        let s = crate::sdf::sample_grid(grid, p);
        if !s.inside {
            continue;
        }
        // Gradient of the interpolant: for each corner the basis
        // function is separable, so d(basis)/dx = +-1/cell_x times the
        // other two axis weights.
        let wx = [1.0 - s.fx, s.fx];
        let wy = [1.0 - s.fy, s.fy];
        let wz = [1.0 - s.fz, s.fz];
        let mut g: Vector3<f64> = Vector3::zeros();
        let mut corner_grads = [[0.0; 3]; 8];
        for k in 0..8usize {
            let dx = k & 1;
            let dy = (k >> 1) & 1;
            let dz = (k >> 2) & 1;
            let sx = if dx == 0 { -1.0 } else { 1.0 } / cs.x;
            let sy = if dy == 0 { -1.0 } else { 1.0 } / cs.y;
            let sz = if dz == 0 { -1.0 } else { 1.0 } / cs.z;
            let gx = sx * wy[dy] * wz[dz];
            let gy = wx[dx] * sy * wz[dz];
            let gz = wx[dx] * wy[dy] * sz;
            corner_grads[k] = [gx, gy, gz];
            let sv = grid.sdf[grid.vertex_index(s.ix + dx, s.iy + dy, s.iz + dz)];
            g.x += sv * gx;
            g.y += sv * gy;
            g.z += sv * gz;
        }
        let gn = g.norm();
        loss += (gn - 1.0).powi(2) * norm;
        if gn < 1e-12 {
            continue;
        }
        let scale = 2.0 * (gn - 1.0) / gn * norm;
        for (k, cg) in corner_grads.iter().enumerate() {
            let vi = grid.vertex_index(s.ix + (k & 1), s.iy + ((k >> 1) & 1), s.iz + ((k >> 2) & 1));
            dsdf[vi] += scale * (g.x * cg[0] + g.y * cg[1] + g.z * cg[2]);
        }
    }
    (loss, dsdf)
}

/// Eikonal loss over `n_points` uniform samples in the grid bounds.
pub fn eikonal_loss<R: Rng>(
    grid: &VoxelSdfGrid,
    n_points: usize,
    rng: &mut R,
) -> (f64, Vec<f64>) {
    assert!(n_points >= 1);
    let lo = grid.bounds.min_v();
    let ext = grid.bounds.extents();
    let points: Vec<Vector3<f64>> = (0..n_points)
        .map(|_| {
            Vector3::new(
                lo.x + rng.gen::<f64>() * ext.x,
                lo.y + rng.gen::<f64>() * ext.y,
                lo.z + rng.gen::<f64>() * ext.z,
            )
        })
        .collect();
    eikonal_loss_at(grid, &points)
}
