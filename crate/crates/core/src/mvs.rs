//! Classical plane-sweep multi-view stereo.
//!
//! Produces the per-pixel depth probability volumes consumed by the
//! optimizer, plus winner-takes-all depth extraction, cascade hypothesis
//! generation with halved search width, geometric consistency filtering,
//! and depth-map fusion into a point cloud.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{apply_homography, backproject, plane_homography, project, Camera};
use crate::error::{Error, Result};
use crate::eval::PointCloud;
use crate::img::{bilinear_sample, ImageBuffer};

/// Maximum matching cost (1 - NCC with NCC = -1).
pub const COST_MAX: f64 = 2.0;
/// Neutral cost assigned when a patch has no usable variance.
pub const COST_NEUTRAL: f64 = 1.0;
const VARIANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub enum HypothesisLayout {
    /// One shared, strictly increasing list for every pixel (stage 1).
    Global(Vec<f64>),
    /// Per-pixel lists, pixel-major / hypothesis-minor (stages >= 2).
    PerPixel(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct DepthHypotheses {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Spacing between consecutive hypotheses.
    pub interval: f64,
    pub layout: HypothesisLayout,
}

impl DepthHypotheses {
    /// Shared uniform hypotheses spanning [d_min, d_max].
    pub fn global_range(width: usize, height: usize, d_min: f64, d_max: f64, count: usize) -> Self {
        assert!(count >= 2 && d_min > 0.0 && d_max > d_min);
        let interval = (d_max - d_min) / (count - 1) as f64;
        let values = (0..count).map(|i| d_min + i as f64 * interval).collect();
        DepthHypotheses {
            width,
            height,
            count,
            interval,
            layout: HypothesisLayout::Global(values),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        match &self.layout {
            HypothesisLayout::Global(v) => v,
            HypothesisLayout::PerPixel(v) => {
                let base = (y * self.width + x) * self.count;
                &v[base..base + self.count]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Pixel-major, hypothesis-minor.
    pub cost: Vec<f64>,
    /// Pixels where every hypothesis had no usable source view.
    pub unsupervised: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ProbabilityVolume {
    pub width: usize,
    pub height: usize,
    pub hypotheses: DepthHypotheses,
    /// Pixel-major, hypothesis-minor; each pixel's row sums to 1.
    pub prob: Vec<f64>,
    pub unsupervised: Vec<bool>,
}

impl ProbabilityVolume {
    #[inline]
    pub fn row(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.hypotheses.count;
        &self.prob[base..base + self.hypotheses.count]
    }

    /// Probability density linearly interpolated along the hypothesis
    /// axis at `depth`; zero outside the hypothesis range.
    pub fn interp_depth(&self, x: usize, y: usize, depth: f64) -> f64 {
        let hyps = self.hypotheses.at(x, y);
        let row = self.row(x, y);
        interp_along_hypotheses(hyps, row, depth)
    }
}

pub fn interp_along_hypotheses(hyps: &[f64], probs: &[f64], depth: f64) -> f64 {
    let n = hyps.len();
    if depth < hyps[0] || depth > hyps[n - 1] {
        return 0.0;
    }
    // Binary search for the bracketing interval.
    let k = hyps.partition_point(|&h| h <= depth);
    if k == 0 {
        return probs[0];
    }
    if k >= n {
        return probs[n - 1];
    }
    let lo = k - 1;
    let span = hyps[k] - hyps[lo];
    if span <= 0.0 {
        return probs[lo];
    }
    let f = (depth - hyps[lo]) / span;
    probs[lo] * (1.0 - f) + probs[k] * f
}

/// Depth map with a parallel confidence buffer; 0 encodes invalid.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub depth: ImageBuffer,
    pub confidence: ImageBuffer,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap {
            depth: ImageBuffer::new(width, height, 1),
            confidence: ImageBuffer::new(width, height, 1),
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.depth.get(x, y, 0)
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.depth.get(x, y, 0) > 0.0
    }
}

/// Plane-sweep matching cost: mean over source views of (1 - NCC)
/// between the reference window and the homography-warped source window.
/// Sources whose warped footprint leaves the image are excluded; with no
/// usable source the cost is `COST_MAX` and the pixel may end up flagged
/// unsupervised.
pub fn matching_cost(
    ref_img: &ImageBuffer,
    src_imgs: &[&ImageBuffer],
    ref_cam: &Camera,
    src_cams: &[&Camera],
    hyps: &DepthHypotheses,
    window: usize,
) -> Result<CostVolume> {
    if src_imgs.is_empty() {
        return Err(Error::NoSourceViews);
    }
    assert_eq!(src_imgs.len(), src_cams.len());
    assert!(window % 2 == 1, "window must be odd");
    let ref_gray = ref_img.to_gray();
    let src_grays: Vec<ImageBuffer> = src_imgs.iter().map(|s| s.to_gray()).collect();
    let (w, h, count) = (hyps.width, hyps.height, hyps.count);
    assert_eq!(ref_gray.width, w);
    assert_eq!(ref_gray.height, h);
    let radius = (window / 2) as i64;

    // For a shared hypothesis list the homography depends only on
    // (source, depth); precompute those once.
    let global_homs: Option<Vec<Vec<nalgebra::Matrix3<f64>>>> = match &hyps.layout {
        HypothesisLayout::Global(values) => Some(
            src_cams
                .iter()
                .map(|sc| {
                    values
                        .iter()
                        .map(|&d| plane_homography(ref_cam, sc, d).expect("positive depth"))
                        .collect()
                })
                .collect(),
        ),
        HypothesisLayout::PerPixel(_) => None,
    };

    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut cost_row = vec![0.0; w * count];
            let mut unsup_row = vec![false; w];
            for x in 0..w {
                // In-bounds reference window offsets and values.
                let mut offsets: Vec<(i64, i64, f64)> = Vec::with_capacity(window * window);
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let sx = x as i64 + dx;
                        let sy = y as i64 + dy;
                        if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                            offsets.push((dx, dy, ref_gray.get(sx as usize, sy as usize, 0)));
                        }
                    }
                }
                let pixel_hyps = hyps.at(x, y);
                let mut any_src = false;
                for (k, &d) in pixel_hyps.iter().enumerate() {
                    let mut acc = 0.0;
                    let mut n_src = 0usize;
                    for (j, src_gray) in src_grays.iter().enumerate() {
                        let hom = match &global_homs {
                            Some(gh) => gh[j][k],
                            None => match plane_homography(ref_cam, src_cams[j], d) {
                                Ok(m) => m,
                                Err(_) => continue,
                            },
                        };
                        if let Some(ncc) = window_ncc(&offsets, x, y, &hom, src_gray) {
                            acc += 1.0 - ncc;
                            n_src += 1;
                        }
                    }
                    let c = if n_src > 0 {
                        any_src = true;
                        acc / n_src as f64
                    } else {
                        COST_MAX
                    };
                    cost_row[x * count + k] = c;
                }
                unsup_row[x] = !any_src;
            }
            (cost_row, unsup_row)
        })
        .collect();

    let mut cost = Vec::with_capacity(w * h * count);
    let mut unsupervised = Vec::with_capacity(w * h);
    for (cr, ur) in rows {
        cost.extend(cr);
        unsupervised.extend(ur);
    }
    Ok(CostVolume {
        width: w,
        height: h,
        count,
        cost,
        unsupervised,
    })
}

/// NCC between the reference window values and the warped source
/// samples. `None` when any warped sample leaves the source image;
/// zero-variance patches give NCC = 0 (neutral).
fn window_ncc(
    offsets: &[(i64, i64, f64)],
    x: usize,
    y: usize,
    hom: &nalgebra::Matrix3<f64>,
    src_gray: &ImageBuffer,
) -> Option<f64> {
    let n = offsets.len();
    if n < 4 {
        return None;
    }
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for &(dx, dy, rv) in offsets {
        let p = Vector2::new(x as f64 + dx as f64, y as f64 + dy as f64);
        let sp = apply_homography(hom, &p)?;
        let sv = bilinear_sample(src_gray, sp.x, sp.y).ok()?;
        a.push(rv);
        b.push(sv[0]);
    }
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for i in 0..n {
        let da = a[i] - ma;
        let db = b[i] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    if va < VARIANCE_EPS || vb < VARIANCE_EPS {
        return Some(0.0);
    }
    Some(cov / (va * vb).sqrt())
}

/// Per-pixel softmax of negated costs. Unsupervised pixels get the
/// uniform distribution (and confidence 0 downstream).
pub fn cost_to_probability(
    cost: &CostVolume,
    hypotheses: DepthHypotheses,
    temperature: f64,
) -> ProbabilityVolume {
    assert!(temperature > 0.0);
    let count = cost.count;
    let mut prob = vec![0.0; cost.cost.len()];
    for px in 0..cost.width * cost.height {
        let row = &cost.cost[px * count..(px + 1) * count];
        let out = &mut prob[px * count..(px + 1) * count];
        if cost.unsupervised[px] {
            out.fill(1.0 / count as f64);
            continue;
        }
        let logits: Vec<f64> = row.iter().map(|c| -c / temperature).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, l) in out.iter_mut().zip(&logits) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    ProbabilityVolume {
        width: cost.width,
        height: cost.height,
        hypotheses,
        prob,
        unsupervised: cost.unsupervised.clone(),
    }
}

/// Winner-takes-all depth: the hypothesis with maximum probability,
/// ties broken toward the smaller depth. Confidence is that maximum
/// (0 for unsupervised pixels).
pub fn wta_depth(pv: &ProbabilityVolume) -> DepthMap {
    let mut dm = DepthMap::new(pv.width, pv.height);
    for y in 0..pv.height {
        for x in 0..pv.width {
            let row = pv.row(x, y);
            let mut best = 0usize;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            dm.depth.set(x, y, 0, pv.hypotheses.at(x, y)[best]);
            let conf = if pv.unsupervised[y * pv.width + x] {
                0.0
            } else {
                row[best]
            };
            dm.confidence.set(x, y, 0, conf);
        }
    }
    dm
}

/// Per-pixel hypotheses for the next cascade stage: `count` depths
/// centered on the guide depth with spacing `fraction` (the halved
/// search width) times the stage's default interval. Pixels with an
/// invalid guide fall back to the full stage-1 range.
pub fn cascade_hypotheses(
    guide: &DepthMap,
    count: usize,
    default_interval: f64,
    fraction: f64,
    fallback_range: [f64; 2],
) -> DepthHypotheses {
    let (w, h) = (guide.width(), guide.height());
    let spacing = fraction * default_interval;
    let fallback: Vec<f64> = {
        let step = (fallback_range[1] - fallback_range[0]) / (count - 1) as f64;
        (0..count).map(|i| fallback_range[0] + i as f64 * step).collect()
    };
    let mut values = vec![0.0; w * h * count];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * count;
            let g = guide.get(x, y);
            if g > 0.0 {
                let mut start = g - (count - 1) as f64 / 2.0 * spacing;
                // Keep all hypotheses positive.
                if start <= 0.0 {
                    start = spacing * 1e-3;
                }
                for k in 0..count {
                    values[base + k] = start + k as f64 * spacing;
                }
            } else {
                values[base..base + count].copy_from_slice(&fallback);
            }
        }
    }
    DepthHypotheses {
        width: w,
        height: h,
        count,
        interval: spacing,
        layout: HypothesisLayout::PerPixel(values),
    }
}

/// Cross-view geometric consistency: a reference pixel passes when at
/// least `min_consistent` source views reproject it back within
/// `px_tol` pixels and `rel_depth_tol` relative depth.
pub fn geometric_consistency_mask(
    ref_depth: &DepthMap,
    src_depths: &[&DepthMap],
    ref_cam: &Camera,
    src_cams: &[&Camera],
    px_tol: f64,
    rel_depth_tol: f64,
    min_consistent: usize,
) -> Vec<bool> {
    assert!(min_consistent >= 1);
    assert_eq!(src_depths.len(), src_cams.len());
    let (w, h) = (ref_depth.width(), ref_depth.height());
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let d = ref_depth.get(x, y);
            if d <= 0.0 {
                continue;
            }
            let pixel = Vector2::new(x as f64, y as f64);
            let world = match backproject(ref_cam, &pixel, d) {
                Ok(p) => p,
                Err(_) => continue,
            };
            let mut consistent = 0usize;
            for (sd, sc) in src_depths.iter().zip(src_cams) {
                let Ok((spx, _)) = project(sc, &world) else {
                    continue;
                };
                let sx = spx.x.round();
                let sy = spx.y.round();
                if sx < 0.0 || sy < 0.0 || sx >= sd.width() as f64 || sy >= sd.height() as f64 {
                    continue;
                }
                let sdepth = sd.get(sx as usize, sy as usize);
                if sdepth <= 0.0 {
                    continue;
                }
                let Ok(sworld) = backproject(sc, &Vector2::new(sx, sy), sdepth) else {
                    continue;
                };
                let Ok((rpx, rdepth)) = project(ref_cam, &sworld) else {
                    continue;
                };
                if (rpx - pixel).norm() <= px_tol && (rdepth - d).abs() / d < rel_depth_tol {
                    consistent += 1;
                }
            }
            if consistent >= min_consistent {
                mask[y * w + x] = true;
            }
        }
    }
    mask
}

/// Backproject every pixel passing (mask AND confidence AND valid depth)
/// from every view and merge near-duplicates by averaging within grid
/// cells of `merge_radius`. Output is independent of view order.
pub fn fuse_point_cloud(
    depths: &[&DepthMap],
    masks: &[Vec<bool>],
    cams: &[&Camera],
    conf_threshold: f64,
    merge_radius: f64,
) -> PointCloud {
    assert_eq!(depths.len(), masks.len());
    assert_eq!(depths.len(), cams.len());
    let mut candidates: Vec<Vector3<f64>> = Vec::new();
    for ((dm, mask), cam) in depths.iter().zip(masks).zip(cams) {
        let (w, h) = (dm.width(), dm.height());
        for y in 0..h {
            for x in 0..w {
                let d = dm.get(x, y);
                if d <= 0.0 || !mask[y * w + x] || dm.confidence.get(x, y, 0) < conf_threshold {
                    continue;
                }
                if let Ok(p) = backproject(cam, &Vector2::new(x as f64, y as f64), d) {
                    candidates.push(p);
                }
            }
        }
    }
    // Sort before binning so the in-cell accumulation order (and thus
    // the floating-point result) does not depend on the view order.
    candidates.sort_by(|a, b| {
        (a.x, a.y, a.z)
            .partial_cmp(&(b.x, b.y, b.z))
            .expect("finite points")
    });
    let inv_r = if merge_radius > 0.0 {
        1.0 / merge_radius
    } else {
        0.0
    };
    let mut cells: HashMap<(i64, i64, i64), (Vector3<f64>, usize)> = HashMap::new();
    let mut order: Vec<(i64, i64, i64)> = Vec::new();
    for p in &candidates {
        let key = if inv_r > 0.0 {
            (
                (p.x * inv_r).floor() as i64,
                (p.y * inv_r).floor() as i64,
                (p.z * inv_r).floor() as i64,
            )
        } else {
            (order.len() as i64, 0, 0)
        };
        match cells.get_mut(&key) {
            Some((sum, n)) => {
                *sum += p;
                *n += 1;
            }
            None => {
                cells.insert(key, (*p, 1));
                order.push(key);
            }
        }
    }
    let points = order
        .iter()
        .map(|key| {
            let (sum, n) = &cells[key];
            sum / *n as f64
        })
        .collect();
    PointCloud {
        points,
        colors: None,
    }
}
