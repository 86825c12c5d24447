//! Axis-aligned bounding box.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Ray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Aabb {
            min: [min.x, min.y, min.z],
            max: [max.x, max.y, max.z],
        }
    }

    pub fn min_v(&self) -> Vector3<f64> {
        Vector3::new(self.min[0], self.min[1], self.min[2])
    }

    pub fn max_v(&self) -> Vector3<f64> {
        Vector3::new(self.max[0], self.max[1], self.max[2])
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min_v() + self.max_v()) * 0.5
    }

    pub fn extents(&self) -> Vector3<f64> {
        self.max_v() - self.min_v()
    }

    pub fn diameter(&self) -> f64 {
        self.extents().norm()
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Unsigned distance from a point to the box (0 inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let d = (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]);
            d2 += d * d;
        }
        d2.sqrt()
    }

    /// Intersection of a ray with the box as a `[t_enter, t_exit]`
    /// interval clipped to `[ray.t_near, ray.t_far]`.
    pub fn clip_ray(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = ray.t_near;
        let mut t1 = ray.t_far;
        for i in 0..3 {
            let d = ray.direction[i];
            let o = ray.origin[i];
            if d.abs() < 1e-15 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let (mut a, mut b) = ((self.min[i] - o) / d, (self.max[i] - o) / d);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_box() -> Aabb {
        Aabb::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0))
    }

    #[test]
    fn contains_and_distance() {
        let b = unit_box();
        assert!(b.contains(&Vector3::zeros()));
        assert_eq!(b.distance(&Vector3::zeros()), 0.0);
        assert_relative_eq!(b.distance(&Vector3::new(3.0, 0.0, 0.0)), 2.0);
        assert_relative_eq!(b.distance(&Vector3::new(2.0, 2.0, 1.0)), 2.0f64.sqrt());
    }

    #[test]
    fn clip_ray_through_box() {
        let b = unit_box();
        let ray = Ray {
            origin: Vector3::new(0.0, 0.0, -3.0),
            direction: Vector3::new(0.0, 0.0, 1.0),
            t_near: 0.0,
            t_far: 10.0,
        };
        let (t0, t1) = b.clip_ray(&ray).unwrap();
        assert_relative_eq!(t0, 2.0);
        assert_relative_eq!(t1, 4.0);
    }

    #[test]
    fn clip_ray_miss() {
        let b = unit_box();
        let ray = Ray {
            origin: Vector3::new(5.0, 0.0, -3.0),
            direction: Vector3::new(0.0, 0.0, 1.0),
            t_near: 0.0,
            t_far: 10.0,
        };
        assert!(b.clip_ray(&ray).is_none());
    }

    #[test]
    fn diameter_is_corner_distance() {
        assert_relative_eq!(unit_box().diameter(), 12.0f64.sqrt());
    }
}
