//! Rigid-body math and pinhole projection shared by every other module.
//!
//! Conventions:
//! - lengths in meters, angles in radians;
//! - camera frame is x right, y down, z forward;
//! - pixel coordinates handed around between modules are relative to the
//!   principal point. Image-buffer coordinates add `(cx, cy)`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Frobenius deviation from orthonormality tolerated by [`Rotation3::new`].
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal (frobenius deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation matrix has negative determinant")]
    Reflection,
    #[error("gimbal lock: pitch within 1e-9 of ±π/2")]
    GimbalLock,
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Proper rotation matrix (orthonormal, det = +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    /// Validates orthonormality and handedness.
    pub fn new(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let dev = (m.transpose() * m - Matrix3::identity()).norm();
        if !dev.is_finite() || dev > ORTHONORMAL_TOLERANCE {
            return Err(GeometryError::NotOrthonormal(dev));
        }
        if m.determinant() <= 0.0 {
            return Err(GeometryError::Reflection);
        }
        Ok(Self(m))
    }

    /// Nearest rotation to `m` in the Frobenius sense.
    pub fn project(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn rot_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation by `|v|` radians about `v` (Rodrigues).
    pub fn exp(v: &Vec3) -> Self {
        let theta = v.norm();
        let k = skew(v);
        if theta < 1e-12 {
            return Self(Matrix3::identity() + k);
        }
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Self(Matrix3::identity() + k * a + k * k * b)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// Axis-angle vector of this rotation, angle in `[0, π]`.
    pub fn log(&self) -> Vec3 {
        let r = &self.0;
        let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        let cos = (r.trace() - 1.0) * 0.5;
        let theta = (0.5 * w.norm()).atan2(cos);
        if theta < 1e-8 {
            return w * 0.5;
        }
        if std::f64::consts::PI - theta < 1e-3 {
            // Near π the antisymmetric part vanishes; use the symmetric part.
            let s = (r + r.transpose()) * 0.5 - Matrix3::identity() * theta.cos();
            let i = s.diagonal().imax();
            let mut axis = s.column(i).into_owned().normalize();
            if w.dot(&axis) < 0.0 {
                axis = -axis;
            }
            return axis * theta;
        }
        w * (theta / (2.0 * theta.sin()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn mul(&self, other: &Rotation3) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Geodesic angle between two rotations.
    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        let r = self.0.transpose() * other.0;
        let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        (0.5 * w.norm()).atan2((r.trace() - 1.0) * 0.5)
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    pub fn from_row_major(r: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_row_slice(r))
    }
}

pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid 6-DOF transform. `a.compose(&b)` maps points as `a` applied after `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform3D {
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl Default for Transform3D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform3D {
    pub fn new(rotation: Rotation3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Rotation3::identity(), t)
    }

    pub fn from_rotation(r: Rotation3) -> Self {
        Self::new(r, Vec3::zeros())
    }

    pub fn compose(&self, other: &Transform3D) -> Transform3D {
        Transform3D {
            rotation: self.rotation.mul(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform3D {
        let r_inv = self.rotation.inverse();
        Transform3D {
            rotation: r_inv,
            translation: -r_inv.apply(&self.translation),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.apply(v)
    }

    /// Unit vector of the local x, y or z axis expressed in the parent frame.
    pub fn axis(&self, i: usize) -> Vec3 {
        self.rotation.matrix().column(i).into_owned()
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let r = Rotation3::new(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(Self::new(r, m.fixed_view::<3, 1>(0, 3).into_owned()))
    }

    /// Rotation angle (rad) and translation distance (m) between two poses.
    pub fn distance(&self, other: &Transform3D) -> (f64, f64) {
        (self.rotation.angle_to(&other.rotation), (self.translation - other.translation).norm())
    }

    /// Linear interpolation of translation with geodesic interpolation of rotation.
    pub fn interpolate(&self, other: &Transform3D, s: f64) -> Transform3D {
        let rel = self.rotation.inverse().mul(&other.rotation).log();
        Transform3D {
            rotation: self.rotation.mul(&Rotation3::exp(&(rel * s))),
            translation: self.translation + (other.translation - self.translation) * s,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TransformJson {
    r: [f64; 9],
    t: [f64; 3],
}

impl Serialize for Transform3D {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TransformJson {
            r: self.rotation.row_major(),
            t: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Transform3D {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = TransformJson::deserialize(d)?;
        let rotation = Rotation3::from_row_major(&raw.r).map_err(serde::de::Error::custom)?;
        Ok(Transform3D::new(rotation, Vec3::new(raw.t[0], raw.t[1], raw.t[2])))
    }
}

/// Roll, pitch, yaw in radians; `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rpy {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Rpy {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }
}

pub fn rpy_to_rotation(r: Rpy) -> Rotation3 {
    Rotation3::rot_z(r.yaw).mul(&Rotation3::rot_y(r.pitch)).mul(&Rotation3::rot_x(r.roll))
}

pub fn rotation_to_rpy(r: &Rotation3) -> Result<Rpy, GeometryError> {
    let m = r.matrix();
    if m[(2, 0)].abs() >= 1.0 - 1e-9 {
        return Err(GeometryError::GimbalLock);
    }
    Ok(Rpy {
        roll: wrap_angle(m[(2, 1)].atan2(m[(2, 2)])),
        pitch: -m[(2, 0)].asin(),
        yaw: wrap_angle(m[(1, 0)].atan2(m[(0, 0)])),
    })
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let intr = Self { f, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    /// Principal point at the image center.
    pub fn centered(f: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!("focal length {} must be > 0", self.f)));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) || !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Principal-point-relative pixel coordinates to image-buffer coordinates.
    pub fn to_buffer(&self, x: f64, y: f64) -> (f64, f64) {
        (x + self.cx, y + self.cy)
    }

    pub fn from_buffer(&self, u: f64, v: f64) -> (f64, f64) {
        (u - self.cx, v - self.cy)
    }

    pub fn contains_buffer(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Pinhole projection to principal-point-relative pixels: `x = f·X/Z`, `y = f·Y/Z`.
pub fn project_pinhole(intr: &CameraIntrinsics, p_cam: &Vec3) -> Result<(f64, f64), GeometryError> {
    if p_cam.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p_cam.z));
    }
    Ok((intr.f * p_cam.x / p_cam.z, intr.f * p_cam.y / p_cam.z))
}

/// Point at depth `z` seen at principal-point-relative pixel `(x, y)`.
pub fn back_project(intr: &CameraIntrinsics, x: f64, y: f64, z: f64) -> Vec3 {
    Vec3::new(x * z / intr.f, y * z / intr.f, z)
}

/// Unit ray direction through principal-point-relative pixel `(x, y)`.
pub fn pixel_ray(intr: &CameraIntrinsics, x: f64, y: f64) -> Vec3 {
    Vec3::new(x / intr.f, y / intr.f, 1.0).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Rotation3::exp(&(v.normalize() * rng.random_range(0.0..PI)))
    }

    fn random_transform(rng: &mut impl Rng) -> Transform3D {
        let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        Transform3D::new(random_rotation(rng), t)
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transform(&mut rng);
        let c = Transform3D::identity().compose(&t);
        assert!((c.to_matrix4() - t.to_matrix4()).norm() < 1e-15);
        let id = t.compose(&t.inverse());
        assert!((id.to_matrix4() - Matrix4::identity()).norm() < 1e-9);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = Transform3D::new(Rotation3::rot_z(30f64.to_radians()), Vec3::new(0.1, -0.2, 0.3));
        let b = Transform3D::new(Rotation3::rot_z(60f64.to_radians()), Vec3::new(-1.0, 0.5, 2.0));
        // Oracle: explicit 4x4 matrices written out by hand.
        let h = |deg: f64, t: [f64; 3]| {
            let (s, c) = deg.to_radians().sin_cos();
            Matrix4::new(c, -s, 0.0, t[0], s, c, 0.0, t[1], 0.0, 0.0, 1.0, t[2], 0.0, 0.0, 0.0, 1.0)
        };
        let expected = h(30.0, [0.1, -0.2, 0.3]) * h(60.0, [-1.0, 0.5, 2.0]);
        let got = a.compose(&b).to_matrix4();
        assert!((got - expected).norm() < 1e-12);
        let r90 = Rotation3::rot_z(FRAC_PI_2);
        assert!((got.fixed_view::<3, 3>(0, 0) - r90.matrix()).norm() < 1e-12);
    }

    #[test]
    fn invert_cases() {
        let id = Transform3D::identity().inverse();
        assert_eq!(id.to_matrix4(), Matrix4::identity());
        let t = Transform3D::from_translation(Vec3::new(1.0, 2.0, 3.0)).inverse();
        assert_eq!(t.translation, Vec3::new(-1.0, -2.0, -3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = random_transform(&mut rng);
            let oracle = t.to_matrix4().try_inverse().unwrap();
            assert!((t.inverse().to_matrix4() - oracle).norm() < 1e-9);
        }
    }

    #[test]
    fn rpy_identity_and_roll() {
        let r = rpy_to_rotation(Rpy::new(0.0, 0.0, 0.0));
        assert_eq!(*r.matrix(), Matrix3::identity());
        // Oracle: rotation about x by +90 degrees maps +y to +z.
        let r = rpy_to_rotation(Rpy::new(FRAC_PI_2, 0.0, 0.0));
        let oracle = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.matrix()[(i, j)] - oracle[(i, j)]).abs() < 1e-15);
            }
        }
        let y = r.apply(&Vec3::y());
        assert!((y - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn rpy_round_trip_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        let mut count = 0;
        while count < 1000 {
            let r = random_rotation(&mut rng);
            let Ok(rpy) = rotation_to_rpy(&r) else { continue };
            let back = rpy_to_rotation(rpy);
            worst = worst.max((back.matrix() - r.matrix()).abs().max());
            count += 1;
        }
        assert!(worst < 1e-9, "worst deviation {worst}");
    }

    #[test]
    fn rpy_gimbal_lock() {
        let r = rpy_to_rotation(Rpy::new(0.3, FRAC_PI_2, 0.1));
        assert_eq!(rotation_to_rpy(&r), Err(GeometryError::GimbalLock));
    }

    #[test]
    fn rpy_ranges() {
        let rpy = rotation_to_rpy(&Rotation3::rot_z(PI)).unwrap();
        assert!((rpy.yaw - PI).abs() < 1e-12);
        assert!(rpy.roll > -PI && rpy.roll <= PI);
    }

    #[test]
    fn projection_examples() {
        let intr = CameraIntrinsics::centered(1000.0, 640, 480).unwrap();
        assert_eq!(project_pinhole(&intr, &Vec3::new(0.0, 0.0, 1.0)).unwrap(), (0.0, 0.0));
        let (x, y) = project_pinhole(&intr, &Vec3::new(0.05, 0.0, 1.0)).unwrap();
        assert!((x - 50.0).abs() < 1e-12 && y == 0.0);
        assert!(matches!(project_pinhole(&intr, &Vec3::new(0.0, 0.0, 0.0)), Err(GeometryError::BehindCamera(_))));
        assert!(matches!(project_pinhole(&intr, &Vec3::new(0.0, 0.0, -1.0)), Err(GeometryError::BehindCamera(_))));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(100.0, 10.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(100.0, 9.5, 0.0, 10, 10).is_ok());
    }

    #[test]
    fn rotation_rejects_non_orthonormal() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-5;
        assert!(matches!(Rotation3::new(m), Err(GeometryError::NotOrthonormal(_))));
        m[(0, 1)] = 1e-8;
        assert!(Rotation3::new(m).is_ok());
        assert_eq!(Rotation3::new(-Matrix3::identity()), Err(GeometryError::Reflection));
    }

    #[test]
    fn log_exp_round_trip_near_pi() {
        for angle in [0.0, 1e-9, 0.5, 3.0, PI - 1e-7, PI] {
            let axis = Vec3::new(0.3, -0.5, 0.8).normalize();
            let r = Rotation3::from_axis_angle(&axis, angle);
            let back = Rotation3::exp(&r.log());
            assert!((back.matrix() - r.matrix()).norm() < 1e-9, "angle {angle}");
        }
    }

    #[test]
    fn transform_json_shape() {
        let t = Transform3D::from_translation(Vec3::new(1.0, 2.0, 3.0));
        let v: serde_json::Value = serde_json::to_value(t).unwrap();
        assert_eq!(v["r"].as_array().unwrap().len(), 9);
        assert_eq!(v["t"], serde_json::json!([1.0, 2.0, 3.0]));
        let back: Transform3D = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
        let bad = serde_json::json!({"r": [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0], "t": [0.0, 0.0, 0.0]});
        assert!(serde_json::from_value::<Transform3D>(bad).is_err());
    }

    proptest! {
        #[test]
        fn rigid_transforms_are_isometries(seed in any::<u64>(), p in prop::array::uniform3(-5.0f64..5.0), q in prop::array::uniform3(-5.0f64..5.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_transform(&mut rng);
            let (p, q) = (Vec3::from(p), Vec3::from(q));
            prop_assert!(((t.apply(&p) - t.apply(&q)).norm() - (p - q).norm()).abs() < 1e-9);
        }

        #[test]
        fn back_projection_inverts_projection(x in -500.0f64..500.0, y in -400.0f64..400.0, z in 0.01f64..100.0) {
            let intr = CameraIntrinsics::centered(1200.0, 1024, 768).unwrap();
            let p = back_project(&intr, x, y, z);
            let (px, py) = project_pinhole(&intr, &p).unwrap();
            prop_assert!((px - x).abs() < 1e-9 && (py - y).abs() < 1e-9);
        }

        #[test]
        fn composition_is_associative(s1 in any::<u64>(), s2 in any::<u64>(), s3 in any::<u64>()) {
            let a = random_transform(&mut ChaCha8Rng::seed_from_u64(s1));
            let b = random_transform(&mut ChaCha8Rng::seed_from_u64(s2));
            let c = random_transform(&mut ChaCha8Rng::seed_from_u64(s3));
            let l = a.compose(&b).compose(&c).to_matrix4();
            let r = a.compose(&b.compose(&c)).to_matrix4();
            prop_assert!((l - r).norm() < 1e-9);
        }
    }
}
