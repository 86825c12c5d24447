//! Pinhole camera model, rays, and plane-induced homographies.
//!
//! Cameras follow the usual computer-vision convention: `rotation` maps
//! world coordinates into the camera frame (x right, y down, z forward)
//! and `translation` is the world origin expressed in the camera frame,
//! so `x_cam = R * x_world + t`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World origin in the camera frame.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// JSON wire format for cameras: rotation stored row-major.
#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    width: usize,
    height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Self {
        debug_assert!(fx > 0.0 && fy > 0.0);
        debug_assert!(width >= 8 && height >= 8);
        debug_assert!(
            (rotation.transpose() * rotation - Matrix3::identity()).norm() < 1e-9,
            "rotation must be orthonormal"
        );
        Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        }
    }

    /// Camera with identity pose, useful in tests.
    pub fn canonical(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self::new(
            fx,
            fy,
            cx,
            cy,
            Matrix3::identity(),
            Vector3::zeros(),
            width,
            height,
        )
    }

    /// Camera placed at `eye` with its optical axis through `target`.
    /// `up` must not be parallel to the viewing direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -rotation * eye;
        Self::new(fx, fy, cx, cy, rotation, translation, width, height)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// World point in the camera frame.
    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Rescale the camera to a new image resolution, preserving the
    /// field of view. Used for coarse-to-fine MVS stages.
    pub fn scaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            fx: self.fx * sx,
            fy: self.fy * sy,
            // Pixel lattice points sit at integer coordinates, so the
            // continuous image plane position of pixel u is u + 0.5.
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            rotation: self.rotation,
            translation: self.translation,
            width,
            height,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = self.rotation[(row, col)];
            }
        }
        serde_json::to_value(CameraJson {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            r,
            t: [self.translation.x, self.translation.y, self.translation.z],
            width: self.width,
            height: self.height,
        })
        .expect("camera serialization cannot fail")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let j: CameraJson = serde_json::from_value(value.clone())?;
        let rotation = Matrix3::new(
            j.r[0], j.r[1], j.r[2], j.r[3], j.r[4], j.r[5], j.r[6], j.r[7], j.r[8],
        );
        if (rotation.transpose() * rotation - Matrix3::identity()).norm() >= 1e-9
            || (rotation.determinant() - 1.0).abs() >= 1e-9
        {
            return Err(Error::InvalidConfig {
                field: "R".into(),
                reason: "rotation is not a proper orthonormal matrix".into(),
            });
        }
        if j.fx <= 0.0 || j.fy <= 0.0 {
            return Err(Error::InvalidConfig {
                field: "fx/fy".into(),
                reason: "focal lengths must be positive".into(),
            });
        }
        if j.width < 8 || j.height < 8 {
            return Err(Error::InvalidConfig {
                field: "width/height".into(),
                reason: "image dimensions must be at least 8".into(),
            });
        }
        Ok(Camera {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            rotation,
            translation: Vector3::new(j.t[0], j.t[1], j.t[2]),
            width: j.width,
            height: j.height,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction in world coordinates.
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Perspective projection of a world point. Returns the pixel position
/// (not clamped to the image) and the camera-frame depth.
pub fn project(camera: &Camera, point: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    let p = camera.to_camera(point);
    if p.z <= 1e-9 {
        return Err(Error::DepthNonPositive(p.z));
    }
    let px = camera.fx * p.x / p.z + camera.cx;
    let py = camera.fy * p.y / p.z + camera.cy;
    Ok((Vector2::new(px, py), p.z))
}

/// Inverse of [`project`]: world point observed at `pixel` with
/// camera-frame depth `depth`.
pub fn backproject(camera: &Camera, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::DepthNonPositive(depth));
    }
    let cam = Vector3::new(
        (pixel.x - camera.cx) / camera.fx * depth,
        (pixel.y - camera.cy) / camera.fy * depth,
        depth,
    );
    Ok(camera.rotation.transpose() * (cam - camera.translation))
}

/// The viewing ray through a pixel, with unit world-space direction.
pub fn pixel_ray(camera: &Camera, pixel: &Vector2<f64>, t_near: f64, t_far: f64) -> Result<Ray> {
    if t_near >= t_far {
        return Err(Error::InvalidRange { t_near, t_far });
    }
    let dir_cam = Vector3::new(
        (pixel.x - camera.cx) / camera.fx,
        (pixel.y - camera.cy) / camera.fy,
        1.0,
    );
    let direction = (camera.rotation.transpose() * dir_cam).normalize();
    Ok(Ray {
        origin: camera.center(),
        direction,
        t_near,
        t_far,
    })
}

/// z-component of the unit ray direction in the camera frame. Converts
/// between arc length `t` along a pixel ray and camera-frame depth:
/// `depth = t * dir_z`.
pub fn ray_dir_z(camera: &Camera, ray: &Ray) -> f64 {
    (camera.rotation * ray.direction).z
}

/// Homography mapping homogeneous reference pixels to source pixels for
/// 3D points on the reference fronto-parallel plane at `depth`.
pub fn plane_homography(ref_cam: &Camera, src_cam: &Camera, depth: f64) -> Result<Matrix3<f64>> {
    if depth <= 0.0 {
        return Err(Error::DepthNonPositive(depth));
    }
    // Relative transform camera_ref -> camera_src.
    let r_rel = src_cam.rotation * ref_cam.rotation.transpose();
    let t_rel = src_cam.translation - r_rel * ref_cam.translation;

    let k_src = Matrix3::new(
        src_cam.fx, 0.0, src_cam.cx, 0.0, src_cam.fy, src_cam.cy, 0.0, 0.0, 1.0,
    );
    let k_ref_inv = Matrix3::new(
        1.0 / ref_cam.fx,
        0.0,
        -ref_cam.cx / ref_cam.fx,
        0.0,
        1.0 / ref_cam.fy,
        -ref_cam.cy / ref_cam.fy,
        0.0,
        0.0,
        1.0,
    );
    // For a reference pixel p, the point at reference depth d is
    // d * K_ref^{-1} p (the z-component of K_ref^{-1} p is 1), so
    // x_src = (d * R_rel + t_rel * e3^T) * K_ref^{-1} p.
    let mut m = r_rel * depth;
    m[(0, 2)] += t_rel.x;
    m[(1, 2)] += t_rel.y;
    m[(2, 2)] += t_rel.z;
    Ok(k_src * m * k_ref_inv)
}

/// Apply a homography to a pixel. Returns `None` when the mapped point
/// is at or behind the source camera.
pub fn apply_homography(h: &Matrix3<f64>, pixel: &Vector2<f64>) -> Option<Vector2<f64>> {
    let p = h * Vector3::new(pixel.x, pixel.y, 1.0);
    if p.z <= 1e-12 {
        return None;
    }
    Some(Vector2::new(p.x / p.z, p.y / p.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_camera<R: Rng>(rng: &mut R) -> Camera {
        let axis = nalgebra::Unit::new_normalize(Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        ));
        let angle = (rng.gen::<f64>() - 0.5) * 2.0;
        let rotation = nalgebra::Rotation3::from_axis_angle(&axis, angle).into_inner();
        Camera::new(
            50.0 + rng.gen::<f64>() * 150.0,
            50.0 + rng.gen::<f64>() * 150.0,
            32.0 + rng.gen::<f64>() * 64.0,
            24.0 + rng.gen::<f64>() * 48.0,
            rotation,
            Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()),
            128,
            96,
        )
    }

    #[test]
    fn project_canonical_unit() {
        let cam = Camera::canonical(1.0, 1.0, 0.0, 0.0, 8, 8);
        let (px, d) = project(&cam, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(0.0, 0.0));
        assert_eq!(d, 1.0);
    }

    #[test]
    fn project_linear_intrinsics() {
        let cam = Camera::canonical(100.0, 100.0, 64.0, 48.0, 128, 96);
        let (px, d) = project(&cam, &Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(px.x, 74.0, max_relative = 1e-12);
        assert_relative_eq!(px.y, 48.0, max_relative = 1e-12);
        assert_eq!(d, 1.0);
    }

    #[test]
    fn project_behind_camera_errors() {
        let cam = Camera::canonical(100.0, 100.0, 64.0, 48.0, 128, 96);
        assert!(matches!(
            project(&cam, &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::DepthNonPositive(_))
        ));
    }

    #[test]
    fn backproject_canonical() {
        let cam = Camera::canonical(1.0, 1.0, 0.0, 0.0, 8, 8);
        let p = backproject(&cam, &Vector2::new(0.0, 0.0), 2.0).unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_rejects_nonpositive_depth() {
        let cam = Camera::canonical(1.0, 1.0, 0.0, 0.0, 8, 8);
        assert!(backproject(&cam, &Vector2::new(0.0, 0.0), 0.0).is_err());
    }

    #[test]
    fn project_backproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let cam = random_camera(&mut rng);
            let pixel = Vector2::new(rng.gen::<f64>() * 127.0, rng.gen::<f64>() * 95.0);
            let depth = 0.5 + rng.gen::<f64>() * 10.0;
            let world = backproject(&cam, &pixel, depth).unwrap();
            let (px, d) = project(&cam, &world).unwrap();
            assert_relative_eq!(px, pixel, max_relative = 1e-6, epsilon = 1e-9);
            assert_relative_eq!(d, depth, max_relative = 1e-9);
        }
    }

    /// Independent oracle: solve the 3x3 linear system
    /// (K R) X = depth * (u, v, 1)^T - K t for the world point.
    #[test]
    fn backproject_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let cam = random_camera(&mut rng);
            let pixel = Vector2::new(rng.gen::<f64>() * 127.0, rng.gen::<f64>() * 95.0);
            let depth = 0.5 + rng.gen::<f64>() * 10.0;
            let k = Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
            let rhs = Vector3::new(pixel.x, pixel.y, 1.0) * depth - k * cam.translation;
            let oracle = (k * cam.rotation).lu().solve(&rhs).unwrap();
            let ours = backproject(&cam, &pixel, depth).unwrap();
            assert_relative_eq!(ours, oracle, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn pixel_ray_canonical_direction() {
        let cam = Camera::canonical(1.0, 1.0, 0.0, 0.0, 8, 8);
        let ray = pixel_ray(&cam, &Vector2::new(0.0, 0.0), 0.1, 10.0).unwrap();
        assert_relative_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn pixel_ray_unit_norm_and_reprojection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let pixel = Vector2::new(rng.gen::<f64>() * 127.0, rng.gen::<f64>() * 95.0);
            let ray = pixel_ray(&cam, &pixel, 0.5, 5.0).unwrap();
            assert_relative_eq!(ray.direction.norm(), 1.0, epsilon = 1e-9);
            let mid = ray.point_at(0.5 * (ray.t_near + ray.t_far));
            let (px, _) = project(&cam, &mid).unwrap();
            assert_relative_eq!(px, pixel, max_relative = 1e-6, epsilon = 1e-6);
        }
    }

    #[test]
    fn pixel_ray_rejects_bad_range() {
        let cam = Camera::canonical(1.0, 1.0, 0.0, 0.0, 8, 8);
        assert!(matches!(
            pixel_ray(&cam, &Vector2::new(0.0, 0.0), 2.0, 1.0),
            Err(Error::InvalidRange { .. })
        ));
    }

    #[test]
    fn homography_identity_for_same_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = random_camera(&mut rng);
        let h = plane_homography(&cam, &cam, 3.0).unwrap();
        let scaled = h / h[(2, 2)];
        assert_relative_eq!(scaled, Matrix3::identity(), epsilon = 1e-9);
    }

    #[test]
    fn homography_matches_backproject_project() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let ref_cam = random_camera(&mut rng);
            let src_cam = random_camera(&mut rng);
            let depth = 1.0 + rng.gen::<f64>() * 5.0;
            let h = plane_homography(&ref_cam, &src_cam, depth).unwrap();
            for _ in 0..100 {
                let pixel = Vector2::new(rng.gen::<f64>() * 127.0, rng.gen::<f64>() * 95.0);
                let world = backproject(&ref_cam, &pixel, depth).unwrap();
                let Ok((expected, _)) = project(&src_cam, &world) else {
                    continue;
                };
                let got = apply_homography(&h, &pixel).unwrap();
                assert_relative_eq!(got, expected, max_relative = 1e-6, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn homography_rejects_nonpositive_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = random_camera(&mut rng);
        assert!(plane_homography(&cam, &cam, 0.0).is_err());
    }

    #[test]
    fn camera_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = random_camera(&mut rng);
        let back = Camera::from_json(&cam.to_json()).unwrap();
        assert_relative_eq!(back.rotation, cam.rotation, epsilon = 1e-15);
        assert_relative_eq!(back.translation, cam.translation, epsilon = 1e-15);
        assert_eq!(back.width, cam.width);
        assert_eq!((back.fx, back.fy, back.cx, back.cy), (cam.fx, cam.fy, cam.cx, cam.cy));
    }

    #[test]
    fn camera_json_rejects_bad_rotation() {
        let mut v = Camera::canonical(1.0, 1.0, 0.0, 0.0, 8, 8).to_json();
        v["R"][0] = serde_json::json!(2.0);
        assert!(matches!(
            Camera::from_json(&v),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn scaled_preserves_field_of_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = random_camera(&mut rng);
        let half = cam.scaled(64, 48);
        // A world point visible in both projects to the geometrically
        // corresponding pixel center position.
        let world = backproject(&cam, &Vector2::new(63.5, 47.5), 4.0).unwrap();
        let (px, _) = project(&half, &world).unwrap();
        assert_relative_eq!(px.x, (63.5 + 0.5) * 0.5 - 0.5, epsilon = 1e-9);
        assert_relative_eq!(px.y, (47.5 + 0.5) * 0.5 - 0.5, epsilon = 1e-9);
    }

    #[test]
    fn ray_dir_z_converts_t_to_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let cam = random_camera(&mut rng);
            let pixel = Vector2::new(rng.gen::<f64>() * 127.0, rng.gen::<f64>() * 95.0);
            let ray = pixel_ray(&cam, &pixel, 0.5, 8.0).unwrap();
            let t = 3.0;
            let (_, depth) = project(&cam, &ray.point_at(t)).unwrap();
            assert_relative_eq!(depth, t * ray_dir_z(&cam, &ray), max_relative = 1e-9);
        }
    }
}
