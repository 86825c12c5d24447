//! End-to-end orchestration: coarse plane-sweep stereo produces
//! probability volumes, the voxel-SDF grid is optimized against them,
//! rendered depths replace the coarse estimates to guide the finer
//! sweep stages with a narrowed search range, and the filtered depth
//! maps fuse into a point cloud. Includes the Adam optimizer and the
//! ablation switches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::Aabb;
use crate::camera::{project, ray_dir_z, Camera};
use crate::error::{Error, Result};
use crate::eval::PointCloud;
use crate::img::ImageBuffer;
use crate::losses::{
    ce_weight_loss, eikonal_loss, gce_weight_loss, photometric_loss, sparsity_loss,
    ConsistencyWeightedSamples, SPARSITY_EPSILON,
};
use crate::mvs::{
    cascade_hypotheses, cost_to_probability, fuse_point_cloud, geometric_consistency_mask,
    matching_cost, wta_depth, DepthHypotheses, DepthMap, ProbabilityVolume,
};
use crate::sdf::{
    backward, camera_ray, init_sphere, render_depth_map, stratified_ts, GridGrads, RaySampleBatch,
    RayUpstream, VoxelSdfGrid,
};

fn default_true() -> bool {
    true
}

/// Switches that disable individual ingredients of the method, each
/// mapping to one ablation study row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Reweight the reference probability by summed source
    /// probabilities; off = reference volume alone.
    #[serde(default = "default_true")]
    pub use_soft_consistency: bool,
    /// Generalized cross entropy; off = plain cross entropy.
    #[serde(default = "default_true")]
    pub use_gce: bool,
    /// Full probability distribution over hypotheses; off = delta
    /// distribution at the argmax depth.
    #[serde(default = "default_true")]
    pub use_prob_volume: bool,
    /// Probability-weighted loss on rendering weights; off = mean
    /// squared error against the consistency-filtered stereo depth
    /// (with `use_soft_consistency` additionally off: no geometric
    /// supervision at all, plain sparse-view photometric fitting).
    #[serde(default = "default_true")]
    pub use_weight_loss: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_soft_consistency: true,
            use_gce: true,
            use_prob_volume: true,
            use_weight_loss: true,
        }
    }
}

fn d_stage_counts() -> Vec<usize> {
    vec![192, 32, 8]
}
fn d_stage_fractions() -> Vec<f64> {
    vec![1.0, 0.5, 0.5]
}
fn d_grid_resolution() -> [usize; 3] {
    [64, 64, 64]
}
fn d_init_radius_fraction() -> f64 {
    0.35
}
fn d_q() -> f64 {
    0.5
}
fn d_ray_batch() -> usize {
    512
}
fn d_total_steps() -> usize {
    5000
}
fn d_warmup_steps() -> usize {
    200
}
fn d_ray_samples() -> usize {
    96
}
fn d_eikonal_samples() -> usize {
    1024
}
fn d_lr_sdf() -> f64 {
    0.01
}
fn d_lr_color() -> f64 {
    0.05
}
fn d_lr_log_beta() -> f64 {
    0.001
}
fn d_w_photometric() -> f64 {
    1.0
}
fn d_w_weight_loss() -> f64 {
    1.0
}
fn d_w_sparsity() -> f64 {
    1.0
}
fn d_w_eikonal() -> f64 {
    0.1
}
fn d_blur_sigma() -> f64 {
    4.0
}
fn d_ncc_window() -> usize {
    5
}
fn d_softmax_temperature() -> f64 {
    0.05
}
fn d_conf_threshold() -> f64 {
    0.1
}
fn d_px_tol() -> f64 {
    1.0
}
fn d_rel_depth_tol() -> f64 {
    0.01
}
fn d_min_consistent() -> usize {
    1
}

/// Full run configuration. All numeric fields have working defaults so
/// a JSON config only needs the scene-dependent entries (bounds and
/// depth range).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// World-space box the grid spans.
    pub bounds: Aabb,
    /// Camera-frame depth search range [d_min, d_max].
    pub depth_range: [f64; 2],
    /// Hypotheses per cascade stage, coarse to fine.
    #[serde(default = "d_stage_counts")]
    pub stage_counts: Vec<usize>,
    /// Hypothesis spacing of each stage as a fraction of the previous
    /// stage's spacing (stage 0 entry is unused). 0.5 is the halved
    /// search width enabled by guided sampling.
    #[serde(default = "d_stage_fractions")]
    pub stage_fractions: Vec<f64>,
    #[serde(default = "d_grid_resolution")]
    pub grid_resolution: [usize; 3],
    /// Initialization sphere radius as a fraction of the smallest
    /// bounds extent (must stay below 0.5).
    #[serde(default = "d_init_radius_fraction")]
    pub init_radius_fraction: f64,
    /// Noise-tolerance exponent of the weight loss, in (0, 1].
    #[serde(default = "d_q")]
    pub q: f64,
    #[serde(default = "d_ray_batch")]
    pub ray_batch: usize,
    #[serde(default = "d_total_steps")]
    pub total_steps: usize,
    /// Steps with blurred photometric targets and the sparsity term.
    #[serde(default = "d_warmup_steps")]
    pub warmup_steps: usize,
    #[serde(default = "d_ray_samples")]
    pub ray_samples: usize,
    #[serde(default = "d_eikonal_samples")]
    pub eikonal_samples: usize,
    #[serde(default = "d_lr_sdf")]
    pub lr_sdf: f64,
    #[serde(default = "d_lr_color")]
    pub lr_color: f64,
    #[serde(default = "d_lr_log_beta")]
    pub lr_log_beta: f64,
    #[serde(default = "d_w_photometric")]
    pub w_photometric: f64,
    #[serde(default = "d_w_weight_loss")]
    pub w_weight_loss: f64,
    #[serde(default = "d_w_sparsity")]
    pub w_sparsity: f64,
    #[serde(default = "d_w_eikonal")]
    pub w_eikonal: f64,
    /// Gaussian sigma (pixels) for the warmup photometric targets.
    #[serde(default = "d_blur_sigma")]
    pub blur_sigma: f64,
    #[serde(default = "d_ncc_window")]
    pub ncc_window: usize,
    /// Temperature of the cost-to-probability softmax.
    #[serde(default = "d_softmax_temperature")]
    pub softmax_temperature: f64,
    /// Minimum depth confidence for fusion.
    #[serde(default = "d_conf_threshold")]
    pub conf_threshold: f64,
    #[serde(default = "d_px_tol")]
    pub px_tol: f64,
    #[serde(default = "d_rel_depth_tol")]
    pub rel_depth_tol: f64,
    #[serde(default = "d_min_consistent")]
    pub min_consistent: usize,
    #[serde(default)]
    pub seed: u64,
    /// Run the cascade with the coarse stereo depths as guides instead
    /// of optimizing the grid: the pure-stereo baseline.
    #[serde(default)]
    pub skip_optimizer: bool,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl PipelineConfig {
    /// Minimal config for a given scene geometry; everything else at
    /// defaults.
    pub fn new(bounds: Aabb, depth_range: [f64; 2]) -> Self {
        serde_json::from_value(serde_json::json!({
            "bounds": bounds,
            "depth_range": depth_range,
        }))
        .expect("defaults are total")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: &str| {
            Err(Error::InvalidConfig {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(self.depth_range[0] > 0.0 && self.depth_range[1] > self.depth_range[0]) {
            return fail("depth_range", "need 0 < d_min < d_max");
        }
        if self.stage_counts.is_empty() || self.stage_counts.iter().any(|&c| c < 2) {
            return fail("stage_counts", "every stage needs at least 2 hypotheses");
        }
        if self.stage_counts.windows(2).any(|w| w[1] >= w[0]) {
            return fail("stage_counts", "counts must be strictly decreasing");
        }
        if self.stage_fractions.len() != self.stage_counts.len() {
            return fail("stage_fractions", "must match stage_counts in length");
        }
        if self.stage_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return fail("stage_fractions", "fractions must be in (0, 1]");
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return fail("q", "must be in (0, 1]");
        }
        if self.ray_batch < 1 {
            return fail("ray_batch", "must be at least 1");
        }
        if self.ray_samples < 8 {
            return fail("ray_samples", "need at least 8 samples per ray");
        }
        if self.grid_resolution.iter().any(|&n| n < 2) {
            return fail("grid_resolution", "need at least 2 vertices per axis");
        }
        if !(self.init_radius_fraction > 0.0 && self.init_radius_fraction < 0.5) {
            return fail("init_radius_fraction", "must be in (0, 0.5)");
        }
        if self.ncc_window % 2 != 1 {
            return fail("ncc_window", "must be odd");
        }
        if self.softmax_temperature <= 0.0 {
            return fail("softmax_temperature", "must be positive");
        }
        if self.min_consistent < 1 {
            return fail("min_consistent", "must be at least 1");
        }
        let ext = self.bounds.extents();
        if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
            return fail("bounds", "box must have positive extent on every axis");
        }
        Ok(())
    }
}

/// Adam moment accumulators for one parameter group.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One Adam update with bias correction. A non-finite gradient aborts
/// the whole step: parameters, moments, and the step counter are left
/// untouched and the error is returned.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient("adam parameter group"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-step loss values, one JSON-lines record each.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub photometric: f64,
    pub weight_loss: f64,
    pub sparsity: f64,
    pub eikonal: f64,
    pub beta: f64,
}

/// Mean squared error between rendered and target depths, with gradient
/// with respect to the rendered values. The depth-supervision ablation.
pub fn depth_mse_supervision(rendered: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(rendered.len(), targets.len());
    if rendered.is_empty() {
        return (0.0, Vec::new());
    }
    let norm = 1.0 / rendered.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; rendered.len()];
    for (i, (&r, &t)) in rendered.iter().zip(targets).enumerate() {
        let d = r - t;
        loss += d * d * norm;
        grads[i] = 2.0 * d * norm;
    }
    (loss, grads)
}

/// Divergence guard: abort when the photometric loss stays above 10x
/// its step-10 value for this many consecutive steps.
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_STREAK: usize = 100;
const BASELINE_STEP: usize = 10;

/// Probability that a correspondence exists at camera-frame depth `z`
/// for the given pixel, honoring the probability-volume ablation: the
/// full distribution, or an indicator within half an interval of the
/// argmax depth.
fn ref_prob(
    pv: &ProbabilityVolume,
    wta: &DepthMap,
    x: usize,
    y: usize,
    z: f64,
    use_prob_volume: bool,
) -> f64 {
    if use_prob_volume {
        pv.interp_depth(x, y, z)
    } else {
        let d = wta.get(x, y);
        if d > 0.0 && (z - d).abs() <= 0.5 * pv.hypotheses.interval {
            1.0
        } else {
            0.0
        }
    }
}

/// Source-view probability at a world point under the same ablation.
fn src_prob(
    pv: &ProbabilityVolume,
    wta: &DepthMap,
    cam: &Camera,
    point: &nalgebra::Vector3<f64>,
    use_prob_volume: bool,
) -> f64 {
    if use_prob_volume {
        crate::losses::src_probability_at(pv, cam, point)
    } else {
        let Ok((px, z)) = project(cam, point) else {
            return 0.0;
        };
        let sx = px.x.round();
        let sy = px.y.round();
        if sx < 0.0 || sy < 0.0 || sx >= pv.width as f64 || sy >= pv.height as f64 {
            return 0.0;
        }
        let d = wta.get(sx as usize, sy as usize);
        if d > 0.0 && (z - d).abs() <= 0.5 * pv.hypotheses.interval {
            1.0
        } else {
            0.0
        }
    }
}

struct RayRecord {
    batch: RaySampleBatch,
    dir_z: f64,
    target: [f64; 3],
    /// Supervision values per sample (weight-loss modes).
    supervision: Option<ConsistencyWeightedSamples>,
    /// Filtered stereo depth target (depth-MSE mode).
    depth_target: Option<f64>,
}

/// Optimize the voxel grid against the coarse-stage probability
/// volumes. `cams`, `images`, and `prob_volumes` are all at the coarse
/// stage resolution, one entry per view. Returns the trained grid and
/// the per-step loss trace.
pub fn optimize_grid(
    config: &PipelineConfig,
    cams: &[Camera],
    images: &[ImageBuffer],
    prob_volumes: &[ProbabilityVolume],
) -> Result<(VoxelSdfGrid, Vec<TraceRecord>)> {
    config.validate()?;
    assert_eq!(cams.len(), images.len());
    assert_eq!(cams.len(), prob_volumes.len());
    let n_views = cams.len();
    if n_views < 2 {
        return Err(Error::NoSourceViews);
    }
    let flags = config.ablation;
    let ext = config.bounds.extents();
    let init_radius = config.init_radius_fraction * ext.x.min(ext.y).min(ext.z);
    let (rx, ry, rz) = (
        config.grid_resolution[0],
        config.grid_resolution[1],
        config.grid_resolution[2],
    );
    let mut grid = init_sphere((rx, ry, rz), config.bounds, init_radius);

    let blurred: Vec<ImageBuffer> = images
        .iter()
        .map(|im| im.gaussian_blur(config.blur_sigma))
        .collect();
    let wta: Vec<DepthMap> = prob_volumes.iter().map(wta_depth).collect();

    // Depth-MSE ablation target: consistency-filtered stereo depths.
    let depth_mse_mode = !flags.use_weight_loss && flags.use_soft_consistency;
    let filter_masks: Vec<Vec<bool>> = if depth_mse_mode {
        (0..n_views)
            .map(|v| {
                let srcs: Vec<&DepthMap> = (0..n_views).filter(|&j| j != v).map(|j| &wta[j]).collect();
                let src_cams: Vec<&Camera> =
                    (0..n_views).filter(|&j| j != v).map(|j| &cams[j]).collect();
                geometric_consistency_mask(
                    &wta[v],
                    &srcs,
                    &cams[v],
                    &src_cams,
                    config.px_tol,
                    config.rel_depth_tol,
                    config.min_consistent,
                )
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut state_sdf = OptimizerState::new(grid.sdf.len());
    let mut state_color = OptimizerState::new(grid.color.len());
    let mut state_beta = OptimizerState::new(1);
    let mut log_beta = [grid.beta.ln()];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.total_steps);
    let mut baseline_photo = f64::INFINITY;
    let mut divergence_streak = 0usize;

    for step in 0..config.total_steps {
        let warmup = step < config.warmup_steps;
        let mut rays = Vec::with_capacity(config.ray_batch);
        for _ in 0..config.ray_batch {
            let view = rng.gen_range(0..n_views);
            let cam = &cams[view];
            let x = rng.gen_range(0..cam.width);
            let y = rng.gen_range(0..cam.height);
            let ray = camera_ray(cam, x as f64, y as f64, config.depth_range);
            let ts = stratified_ts(ray.t_near, ray.t_far, config.ray_samples, &mut rng);
            let batch = crate::sdf::render_samples(&grid, &ray, &ts);
            let dir_z = ray_dir_z(cam, &ray);
            let src = if warmup { &blurred[view] } else { &images[view] };
            let px = src.pixel(x, y);
            let target = [px[0], px[1], px[2]];

            let supervision = if flags.use_weight_loss {
                let mut pprime = Vec::with_capacity(batch.t.len());
                for &t in &batch.t {
                    let z = t * dir_z;
                    let mut p = ref_prob(
                        &prob_volumes[view],
                        &wta[view],
                        x,
                        y,
                        z,
                        flags.use_prob_volume,
                    );
                    if p > 0.0 && flags.use_soft_consistency {
                        let point = ray.point_at(t);
                        let mut src_sum = 0.0;
                        for j in 0..n_views {
                            if j == view {
                                continue;
                            }
                            src_sum += src_prob(
                                &prob_volumes[j],
                                &wta[j],
                                &cams[j],
                                &point,
                                flags.use_prob_volume,
                            );
                        }
                        p *= src_sum;
                    }
                    pprime.push(p);
                }
                Some(ConsistencyWeightedSamples::from_values(pprime))
            } else {
                None
            };

            let depth_target = if depth_mse_mode {
                let w = cams[view].width;
                let d = wta[view].get(x, y);
                if d > 0.0 && filter_masks[view][y * w + x] {
                    Some(d)
                } else {
                    None
                }
            } else {
                None
            };

            rays.push(RayRecord {
                batch,
                dir_z,
                target,
                supervision,
                depth_target,
            });
        }

        // Batch photometric loss over all rays.
        let rendered: Vec<[f64; 3]> = rays.iter().map(|r| r.batch.color).collect();
        let targets: Vec<[f64; 3]> = rays.iter().map(|r| r.target).collect();
        let (l_photo, d_colors) = photometric_loss(&rendered, &targets);

        // Weight loss per supervised ray, averaged over the batch.
        let ray_norm = 1.0 / config.ray_batch as f64;
        let mut l_weight = 0.0;
        let mut weight_grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(rays.len());
        for r in &rays {
            match &r.supervision {
                Some(s) if s.is_supervised => {
                    let (l, g) = if flags.use_gce {
                        gce_weight_loss(&r.batch.weight, s, config.q)?
                    } else {
                        ce_weight_loss(&r.batch.weight, s)
                    };
                    l_weight += l * ray_norm;
                    weight_grads.push(Some(g));
                }
                _ => weight_grads.push(None),
            }
        }

        // Sparsity over unsupervised rays during warmup: rendered
        // camera-frame depth pushed away from the camera.
        let mut sparsity_idx = Vec::new();
        if warmup && flags.use_weight_loss && config.w_sparsity > 0.0 {
            for (i, r) in rays.iter().enumerate() {
                if matches!(&r.supervision, Some(s) if !s.is_supervised) {
                    sparsity_idx.push(i);
                }
            }
        }
        let sparsity_depths: Vec<f64> = sparsity_idx
            .iter()
            .map(|&i| rays[i].batch.depth * rays[i].dir_z)
            .collect();
        let (l_sparsity, sparsity_grads) =
            sparsity_loss(&sparsity_depths, SPARSITY_EPSILON);

        // Depth-MSE ablation over rays with a filtered stereo depth.
        let mut mse_idx = Vec::new();
        let mut mse_rendered = Vec::new();
        let mut mse_targets = Vec::new();
        if depth_mse_mode {
            for (i, r) in rays.iter().enumerate() {
                if let Some(t) = r.depth_target {
                    mse_idx.push(i);
                    mse_rendered.push(r.batch.depth * r.dir_z);
                    mse_targets.push(t);
                }
            }
        }
        let (l_mse, mse_grads) = depth_mse_supervision(&mse_rendered, &mse_targets);

        // Backward: accumulate grid gradients ray by ray (sequential,
        // so the result is independent of thread count).
        let mut grads = GridGrads::zeros(&grid);
        let mut d_depths = vec![0.0; rays.len()];
        for (k, &i) in sparsity_idx.iter().enumerate() {
            d_depths[i] += config.w_sparsity * sparsity_grads[k] * rays[i].dir_z;
        }
        for (k, &i) in mse_idx.iter().enumerate() {
            d_depths[i] += config.w_weight_loss * mse_grads[k] * rays[i].dir_z;
        }
        for (i, r) in rays.iter().enumerate() {
            let d_weight = match &weight_grads[i] {
                Some(g) => g.iter().map(|v| v * config.w_weight_loss * ray_norm).collect(),
                None => Vec::new(),
            };
            let upstream = RayUpstream {
                d_weight,
                d_color: [
                    config.w_photometric * d_colors[i][0],
                    config.w_photometric * d_colors[i][1],
                    config.w_photometric * d_colors[i][2],
                ],
                d_depth: d_depths[i],
            };
            backward(&grid, &r.batch, &upstream, &mut grads);
        }

        let (l_eik, eik_grads) = eikonal_loss(&grid, config.eikonal_samples, &mut rng);
        if config.w_eikonal > 0.0 {
            for (g, e) in grads.sdf.iter_mut().zip(&eik_grads) {
                *g += config.w_eikonal * e;
            }
        }

        adam_step(
            &mut state_sdf,
            &mut grid.sdf,
            &grads.sdf,
            config.lr_sdf,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        )?;
        adam_step(
            &mut state_color,
            &mut grid.color,
            &grads.color,
            config.lr_color,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        )?;
        // Beta is optimized in log space so it stays positive.
        let d_log_beta = [grads.beta * grid.beta];
        adam_step(
            &mut state_beta,
            &mut log_beta,
            &d_log_beta,
            config.lr_log_beta,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        )?;
        grid.beta = log_beta[0].exp().max(grid.beta_min());
        log_beta[0] = grid.beta.ln();

        let photometric = config.w_photometric * l_photo;
        if step + 1 == BASELINE_STEP {
            baseline_photo = photometric;
        }
        if step + 1 > BASELINE_STEP && photometric > DIVERGENCE_FACTOR * baseline_photo {
            divergence_streak += 1;
            if divergence_streak >= DIVERGENCE_STREAK {
                return Err(Error::DivergenceDetected {
                    loss: photometric,
                    baseline: baseline_photo,
                });
            }
        } else {
            divergence_streak = 0;
        }

        trace.push(TraceRecord {
            step,
            photometric,
            weight_loss: config.w_weight_loss * (l_weight + l_mse),
            sparsity: config.w_sparsity * l_sparsity,
            eikonal: config.w_eikonal * l_eik,
            beta: grid.beta,
        });
    }

    Ok((grid, trace))
}

/// Nearest-neighbor resampling of a guide depth map to a finer stage
/// resolution, preserving invalid (zero) pixels.
pub fn upsample_guide(dm: &DepthMap, width: usize, height: usize) -> DepthMap {
    let mut out = DepthMap::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let sx = (x * dm.width() / width).min(dm.width() - 1);
            let sy = (y * dm.height() / height).min(dm.height() - 1);
            out.depth.set(x, y, 0, dm.get(sx, sy));
            out.confidence
                .set(x, y, 0, dm.confidence.get(sx, sy, 0));
        }
    }
    out
}

/// Everything a full run produces.
#[derive(Debug)]
pub struct FullRun {
    /// Trained grid (absent for the stereo-only baseline).
    pub grid: Option<VoxelSdfGrid>,
    pub trace: Vec<TraceRecord>,
    /// Coarse-stage probability volumes, one per view.
    pub stage1_volumes: Vec<ProbabilityVolume>,
    /// Winner-takes-all depths per stage (outer) per view (inner).
    pub stage_depths: Vec<Vec<DepthMap>>,
    /// Depths rendered from the optimized grid that guided stage 2.
    pub guide_depths: Vec<DepthMap>,
    /// Consistency masks for the finest-stage depths.
    pub final_masks: Vec<Vec<bool>>,
    pub cloud: PointCloud,
    /// Hypothesis spacing of the finest stage.
    pub finest_interval: f64,
}

fn sweep_stage(
    config: &PipelineConfig,
    images: &[ImageBuffer],
    cams: &[Camera],
    hyps: &[DepthHypotheses],
) -> Result<(Vec<ProbabilityVolume>, Vec<DepthMap>)> {
    let n = images.len();
    let mut pvs = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for v in 0..n {
        let srcs: Vec<&ImageBuffer> = (0..n).filter(|&j| j != v).map(|j| &images[j]).collect();
        let src_cams: Vec<&Camera> = (0..n).filter(|&j| j != v).map(|j| &cams[j]).collect();
        let cost = matching_cost(
            &images[v],
            &srcs,
            &cams[v],
            &src_cams,
            &hyps[v],
            config.ncc_window,
        )?;
        let pv = cost_to_probability(&cost, hyps[v].clone(), config.softmax_temperature);
        depths.push(wta_depth(&pv));
        pvs.push(pv);
    }
    Ok((pvs, depths))
}

/// Minimum fused-cloud size; fewer points means the reconstruction
/// collapsed.
pub const MIN_FUSED_POINTS: usize = 100;

/// The complete loop: coarse sweep, grid optimization, rendered depths
/// as guides, narrowed finer sweeps, consistency filtering, and fusion.
pub fn run_full(
    config: &PipelineConfig,
    images: &[ImageBuffer],
    cams: &[Camera],
) -> Result<FullRun> {
    config.validate()?;
    let n_views = images.len();
    if n_views != cams.len() || n_views < 2 {
        return Err(Error::InvalidConfig {
            field: "images".into(),
            reason: "need at least 2 views with matching cameras".into(),
        });
    }
    let n_stages = config.stage_counts.len();

    // Per-stage image pyramid, finest last; stage s uses resolution
    // full / 2^(n_stages - 1 - s).
    let mut stage_images: Vec<Vec<ImageBuffer>> = vec![images.to_vec()];
    for _ in 1..n_stages {
        let next = stage_images
            .last()
            .unwrap()
            .iter()
            .map(|im| im.downsample2())
            .collect();
        stage_images.push(next);
    }
    stage_images.reverse();
    let stage_cams: Vec<Vec<Camera>> = stage_images
        .iter()
        .map(|imgs| {
            imgs.iter()
                .zip(cams)
                .map(|(im, c)| c.scaled(im.width, im.height))
                .collect()
        })
        .collect();

    // Stage 1: shared uniform hypotheses over the full depth range.
    let [d_min, d_max] = config.depth_range;
    let hyps0: Vec<DepthHypotheses> = (0..n_views)
        .map(|v| {
            DepthHypotheses::global_range(
                stage_cams[0][v].width,
                stage_cams[0][v].height,
                d_min,
                d_max,
                config.stage_counts[0],
            )
        })
        .collect();
    let (stage1_volumes, stage1_depths) =
        sweep_stage(config, &stage_images[0], &stage_cams[0], &hyps0)?;

    let mut stage_depths = vec![stage1_depths];
    let mut trace = Vec::new();
    let mut grid = None;

    // Guides for the next stage: rendered depths from the optimized
    // grid, or the coarse stereo depths for the baseline.
    let guide_depths: Vec<DepthMap> = if config.skip_optimizer {
        stage_depths[0].clone()
    } else {
        let (g, t) = optimize_grid(config, &stage_cams[0], &stage_images[0], &stage1_volumes)?;
        trace = t;
        let rendered = stage_cams[0]
            .iter()
            .map(|cam| {
                let (depth, confidence) =
                    render_depth_map(&g, cam, config.ray_samples, config.depth_range);
                DepthMap { depth, confidence }
            })
            .collect();
        grid = Some(g);
        rendered
    };

    let mut guides = guide_depths.clone();
    let mut spacing = hyps0[0].interval;
    for s in 1..n_stages {
        let hyps: Vec<DepthHypotheses> = (0..n_views)
            .map(|v| {
                let cam = &stage_cams[s][v];
                let guide = upsample_guide(&guides[v], cam.width, cam.height);
                cascade_hypotheses(
                    &guide,
                    config.stage_counts[s],
                    spacing,
                    config.stage_fractions[s],
                    config.depth_range,
                )
            })
            .collect();
        spacing *= config.stage_fractions[s];
        let (_, depths) = sweep_stage(config, &stage_images[s], &stage_cams[s], &hyps)?;
        guides = depths.clone();
        stage_depths.push(depths);
    }

    let final_depths = stage_depths.last().unwrap();
    let final_cams = &stage_cams[n_stages - 1];
    let final_masks: Vec<Vec<bool>> = (0..n_views)
        .map(|v| {
            let srcs: Vec<&DepthMap> = (0..n_views)
                .filter(|&j| j != v)
                .map(|j| &final_depths[j])
                .collect();
            let src_cams: Vec<&Camera> = (0..n_views)
                .filter(|&j| j != v)
                .map(|j| &final_cams[j])
                .collect();
            geometric_consistency_mask(
                &final_depths[v],
                &srcs,
                &final_cams[v],
                &src_cams,
                config.px_tol,
                config.rel_depth_tol,
                config.min_consistent,
            )
        })
        .collect();

    let depth_refs: Vec<&DepthMap> = final_depths.iter().collect();
    let cam_refs: Vec<&Camera> = final_cams.iter().collect();
    let cloud = fuse_point_cloud(
        &depth_refs,
        &final_masks,
        &cam_refs,
        config.conf_threshold,
        0.5 * spacing,
    );
    if cloud.len() < MIN_FUSED_POINTS {
        return Err(Error::EmptyReconstruction(cloud.len()));
    }

    Ok(FullRun {
        grid,
        trace,
        stage1_volumes,
        stage_depths,
        guide_depths,
        final_masks,
        cloud,
        finest_interval: spacing,
    })
}
