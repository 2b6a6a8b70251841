//! Rigid poses, the SE(3) exponential/logarithm and the pinhole camera.
//!
//! A [`Pose`] always maps world coordinates into the camera frame
//! (camera-from-world). Cameras look down `+z`, with `x` to the right and `y`
//! down, and pixel `(i, j)` covers the square `[i, i+1) x [j, j+1)` so its
//! center sits at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Points closer to the image plane than this are treated as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Skew-symmetric cross-product matrix, `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform mapping world points into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Camera-from-world pose of a camera at `eye` looking at `target`.
    ///
    /// `up` is the world direction that should appear as "up" (negative image
    /// `y`) in the picture.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        let down = forward.cross(&right);
        // Rows of the camera-from-world rotation are the camera axes in world.
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&rot);
        let translation = -(rotation * eye);
        Self {
            rotation,
            translation,
        }
    }

    /// Builds the camera-from-world pose from a world-from-camera pose given
    /// as translation plus quaternion `(qx, qy, qz, qw)`.
    pub fn from_world_from_camera(t: [f64; 3], q: [f64; 4]) -> Self {
        let rotation =
            UnitQuaternion::from_quaternion(Quaternion::new(q[3], q[0], q[1], q[2]));
        Pose::new(rotation, Vector3::from(t)).inverse()
    }

    /// Inverse of [`Pose::from_world_from_camera`].
    pub fn to_world_from_camera(&self) -> ([f64; 3], [f64; 4]) {
        let inv = self.inverse();
        let q = inv.rotation.quaternion();
        (
            [inv.translation.x, inv.translation.y, inv.translation.z],
            [q.i, q.j, q.k, q.w],
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Re-projects the rotation onto the unit sphere, removing drift from
    /// repeated composition.
    pub fn renormalize(&mut self) {
        self.rotation = UnitQuaternion::new_normalize(self.rotation.into_inner());
    }

    /// Geodesic rotation angle (radians) and translation distance to `other`.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let angle = self.rotation.angle_to(&other.rotation);
        (angle, (self.translation - other.translation).norm())
    }
}

/// `(1-cos θ)/θ²` and `(θ-sin θ)/θ³`, with series fallbacks near zero.
fn left_jacobian_coeffs(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Exponential map of a twist ordered `[ω; v]` (rotation first).
pub fn se3_exp(twist: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(twist[0], twist[1], twist[2]);
    let v = Vector3::new(twist[3], twist[4], twist[5]);
    let theta = omega.norm();
    let rotation = UnitQuaternion::from_scaled_axis(omega);
    let (b, c) = left_jacobian_coeffs(theta);
    let w = hat(&omega);
    let jac = Matrix3::identity() + w * b + w * w * c;
    Pose {
        rotation,
        translation: jac * v,
    }
}

/// Logarithm of a pose, inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(pose: &Pose) -> Vector6<f64> {
    let omega = pose.rotation.scaled_axis();
    let theta = omega.norm();
    let w = hat(&omega);
    let coeff = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let jac_inv = Matrix3::identity() - w * 0.5 + w * w * coeff;
    let v = jac_inv * pose.translation;
    Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels with the principal point at the image center.
    pub fn from_fov(horizontal_fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Mean focal length, the `f` used when converting depth to a world size.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    /// Camera-frame point at `depth` along the ray through `pixel`.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }
}

/// Projects a world point to `(pixel, depth)`.
pub fn project_point(
    pose: &Pose,
    k: &Intrinsics,
    world_point: &Vector3<f64>,
) -> Result<(Vector2<f64>, f64)> {
    let pc = pose.transform_point(world_point);
    if pc.z <= DEPTH_EPSILON {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let pixel = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
    Ok((pixel, pc.z))
}

/// World point seen at `pixel` with camera depth `depth`.
pub fn backproject(pose: &Pose, k: &Intrinsics, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    pose.inverse().transform_point(&k.unproject(pixel, depth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    /// Rodrigues' formula written out independently of nalgebra's quaternion path.
    fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
        let theta = omega.norm();
        if theta == 0.0 {
            return Matrix3::identity();
        }
        let k = hat(&(omega / theta));
        Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = se3_exp(&Vector6::zeros());
        assert_eq!(p.translation, Vector3::zeros());
        assert_relative_eq!(p.rotation.angle(), 0.0);
    }

    #[test]
    fn exp_pure_translation() {
        let p = se3_exp(&Vector6::new(0.0, 0.0, 0.0, 1.0, 2.0, 3.0));
        assert_relative_eq!(p.rotation.angle(), 0.0);
        assert_relative_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let p = se3_exp(&Vector6::new(0.0, 0.0, PI / 2.0, 0.0, 0.0, 0.0));
        let oracle = rodrigues(&Vector3::new(0.0, 0.0, PI / 2.0));
        assert_relative_eq!(p.rotation_matrix(), oracle, epsilon = 1e-12);
        let moved = p.transform_point(&Vector3::x());
        assert_relative_eq!(moved, Vector3::y(), epsilon = 1e-12);
        assert_relative_eq!(p.translation.norm(), 0.0);
    }

    #[test]
    fn projection_examples() {
        let k = k100();
        let id = Pose::identity();
        let (px, d) = project_point(&id, &k, &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((px.x, px.y, d), (50.0, 50.0, 2.0));
        let (px, d) = project_point(&id, &k, &Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!((px.x, px.y, d), (100.0, 50.0, 2.0));
        assert!(matches!(
            project_point(&id, &k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn doubling_focal_doubles_offset() {
        let mut k = k100();
        let p = Vector3::new(0.3, -0.2, 1.7);
        let (a, _) = project_point(&Pose::identity(), &k, &p).unwrap();
        k.fx *= 2.0;
        let (b, _) = project_point(&Pose::identity(), &k, &p).unwrap();
        assert_relative_eq!(b.x - k.cx, 2.0 * (a.x - k.cx), epsilon = 1e-12);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 0.0, 3.9, 4, 4).is_ok());
    }

    #[test]
    fn look_at_centers_target() {
        let eye = Vector3::new(0.3, -1.0, -2.5);
        let pose = Pose::look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, -1.0, 0.0));
        let k = k100();
        let (px, d) = project_point(&pose, &k, &Vector3::zeros()).unwrap();
        assert_relative_eq!(px, Vector2::new(50.0, 50.0), epsilon = 1e-9);
        assert_relative_eq!(d, eye.norm(), epsilon = 1e-12);
        assert_relative_eq!(pose.center(), eye, epsilon = 1e-12);
    }

    #[test]
    fn backproject_inverts_projection() {
        let pose = se3_exp(&Vector6::new(0.1, -0.2, 0.05, 0.3, 0.1, 2.0));
        let k = k100();
        let w = Vector3::new(0.2, 0.1, 0.5);
        let (px, d) = project_point(&pose, &k, &w).unwrap();
        assert_relative_eq!(backproject(&pose, &k, &px, d), w, epsilon = 1e-12);
    }

    #[test]
    fn world_from_camera_round_trip() {
        let pose = se3_exp(&Vector6::new(0.4, -0.1, 0.2, 1.0, -2.0, 0.5));
        let (t, q) = pose.to_world_from_camera();
        let back = Pose::from_world_from_camera(t, q);
        let (a, d) = pose.distance(&back);
        assert!(a < 1e-12 && d < 1e-12);
    }

    fn twist(max_angle: f64) -> impl Strategy<Value = Vector6<f64>> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            0.0..max_angle,
            prop::array::uniform3(-5.0f64..5.0),
        )
            .prop_map(|(axis, angle, v)| {
                let axis = Vector3::from(axis);
                let axis = if axis.norm() < 1e-3 {
                    Vector3::z()
                } else {
                    axis.normalize()
                };
                let w = axis * angle;
                Vector6::new(w.x, w.y, w.z, v[0], v[1], v[2])
            })
    }

    proptest! {
        #[test]
        fn log_inverts_exp(t in twist(PI - 0.1)) {
            let back = se3_log(&se3_exp(&t));
            for i in 0..6 {
                prop_assert!((back[i] - t[i]).abs() < 1e-7, "{t:?} -> {back:?}");
            }
        }

        #[test]
        fn compose_with_inverse_is_identity(t in twist(PI)) {
            let p = se3_exp(&t);
            let id = p.compose(&p.inverse());
            let m = id.rotation_matrix() - Matrix3::identity();
            prop_assert!(m.amax() < 1e-9);
            prop_assert!(id.translation.amax() < 1e-9);
            prop_assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn composition_is_associative(a in twist(PI), b in twist(PI), c in twist(PI)) {
            let (a, b, c) = (se3_exp(&a), se3_exp(&b), se3_exp(&c));
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!((left.rotation_matrix() - right.rotation_matrix()).amax() < 1e-9);
            prop_assert!((left.translation - right.translation).amax() < 1e-9);
        }

        #[test]
        fn exp_rotation_matches_rodrigues(t in twist(PI)) {
            let w = Vector3::new(t[0], t[1], t[2]);
            let r = se3_exp(&t).rotation_matrix();
            prop_assert!((r - rodrigues(&w)).amax() < 1e-12);
        }
    }
}
