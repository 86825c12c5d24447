//! Quantitative evaluation: Chamfer distance between point clouds,
//! PSNR/SSIM between images, and depth-map error statistics.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageBuffer;

#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// Optional per-point RGB in [0, 1].
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChamferReport {
    /// Mean nearest-neighbor distance reconstruction -> reference.
    pub accuracy: f64,
    /// Mean nearest-neighbor distance reference -> reconstruction.
    pub completeness: f64,
    /// Arithmetic mean of accuracy and completeness.
    pub mean: f64,
}

/// Balanced k-d tree over 3D points for nearest-neighbor queries.
struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Node layout: subtree over `order[lo..hi]`, median at the midpoint,
    /// split axis = depth % 3.
    order: Vec<usize>,
}

impl KdTree {
    fn build(points: &[Vector3<f64>]) -> Self {
        let order: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            order,
        };
        let n = tree.order.len();
        tree.build_range(0, n, 0);
        tree
    }

    fn build_range(&mut self, lo: usize, hi: usize, axis: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis]
                .partial_cmp(&pts[b][axis])
                .expect("finite coordinates")
        });
        self.build_range(lo, mid, (axis + 1) % 3);
        self.build_range(mid + 1, hi, (axis + 1) % 3);
    }

    fn nearest(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.nearest_range(q, 0, self.order.len(), 0, &mut best);
        best.sqrt()
    }

    fn nearest_range(&self, q: &Vector3<f64>, lo: usize, hi: usize, axis: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = &self.points[self.order[mid]];
        let d2 = (p - q).norm_squared();
        if d2 < *best {
            *best = d2;
        }
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_range(q, near.0, near.1, (axis + 1) % 3, best);
        if delta * delta < *best {
            self.nearest_range(q, far.0, far.1, (axis + 1) % 3, best);
        }
    }
}

/// Chamfer distance between a reconstruction and a reference cloud.
/// Distances above `cap` are clamped when a cap is given.
pub fn chamfer(
    recon: &PointCloud,
    reference: &PointCloud,
    cap: Option<f64>,
) -> Result<ChamferReport> {
    if recon.is_empty() || reference.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let clamp = |d: f64| match cap {
        Some(c) => d.min(c),
        None => d,
    };
    let ref_tree = KdTree::build(&reference.points);
    let accuracy = recon
        .points
        .iter()
        .map(|p| clamp(ref_tree.nearest(p)))
        .sum::<f64>()
        / recon.len() as f64;
    let recon_tree = KdTree::build(&recon.points);
    let completeness = reference
        .points
        .iter()
        .map(|p| clamp(recon_tree.nearest(p)))
        .sum::<f64>()
        / reference.len() as f64;
    Ok(ChamferReport {
        accuracy,
        completeness,
        mean: 0.5 * (accuracy + completeness),
    })
}

/// PSNR in dB for values in [0, 1]. Identical images give +infinity.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&ImageBuffer>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for y in 0..a.height {
        for x in 0..a.width {
            if let Some(m) = mask {
                if m.get(x, y, 0) == 0.0 {
                    continue;
                }
            }
            for c in 0..a.channels {
                let d = a.get(x, y, c) - b.get(x, y, c);
                se += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Windowed SSIM with Gaussian weighting (sigma 1.5), averaged over
/// pixels and channels. Windows are clipped at the border and the
/// weights renormalized.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, window: usize, k1: f64, k2: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let radius = (window / 2) as i64;
    let sigma = 1.5;
    let gauss: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let c1 = (k1 * 1.0f64).powi(2);
    let c2 = (k2 * 1.0f64).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..a.height as i64 {
        for x in 0..a.width as i64 {
            for c in 0..a.channels {
                let mut wsum = 0.0;
                let mut ma = 0.0;
                let mut mb = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let sx = x + dx;
                        let sy = y + dy;
                        if sx < 0 || sy < 0 || sx >= a.width as i64 || sy >= a.height as i64 {
                            continue;
                        }
                        let w = gauss[(dx + radius) as usize] * gauss[(dy + radius) as usize];
                        wsum += w;
                        ma += w * a.get(sx as usize, sy as usize, c);
                        mb += w * b.get(sx as usize, sy as usize, c);
                    }
                }
                ma /= wsum;
                mb /= wsum;
                let mut va = 0.0;
                let mut vb = 0.0;
                let mut cov = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let sx = x + dx;
                        let sy = y + dy;
                        if sx < 0 || sy < 0 || sx >= a.width as i64 || sy >= a.height as i64 {
                            continue;
                        }
                        let w = gauss[(dx + radius) as usize] * gauss[(dy + radius) as usize]
                            / wsum;
                        let da = a.get(sx as usize, sy as usize, c) - ma;
                        let db = b.get(sx as usize, sy as usize, c) - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                }
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepthErrorStats {
    pub mae: f64,
    /// Fraction of pixels within 1x / 2x / 4x the given interval.
    pub frac_1: f64,
    pub frac_2: f64,
    pub frac_4: f64,
    pub count: usize,
}

/// Error statistics over pixels valid (non-zero) in both depth maps and
/// inside the optional mask. Thresholds are multiples of `interval`,
/// the finest hypothesis spacing.
pub fn depth_error_stats(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    mask: Option<&ImageBuffer>,
    interval: f64,
) -> Result<DepthErrorStats> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::DimensionMismatch(
            pred.width,
            pred.height,
            gt.width,
            gt.height,
        ));
    }
    let mut abs_sum = 0.0;
    let mut n = 0usize;
    let mut within = [0usize; 3];
    for y in 0..pred.height {
        for x in 0..pred.width {
            if pred.get(x, y, 0) == 0.0 || gt.get(x, y, 0) == 0.0 {
                continue;
            }
            if let Some(m) = mask {
                if m.get(x, y, 0) == 0.0 {
                    continue;
                }
            }
            let err = (pred.get(x, y, 0) - gt.get(x, y, 0)).abs();
            abs_sum += err;
            n += 1;
            for (i, mult) in [1.0, 2.0, 4.0].iter().enumerate() {
                if err <= mult * interval {
                    within[i] += 1;
                }
            }
        }
    }
    if n == 0 {
        return Ok(DepthErrorStats {
            mae: 0.0,
            frac_1: 0.0,
            frac_2: 0.0,
            frac_4: 0.0,
            count: 0,
        });
    }
    Ok(DepthErrorStats {
        mae: abs_sum / n as f64,
        frac_1: within[0] as f64 / n as f64,
        frac_2: within[1] as f64 / n as f64,
        frac_4: within[2] as f64 / n as f64,
        count: n,
    })
}
