//! Back-projection of stereo correspondences into camera-1 coordinates.
//!
//! Two routes are provided: the closed-form verged-stereo depth formula
//! (a small-angle model of the verge rotation) and the exact midpoint of the
//! two back-projected rays.

use crate::geometry::{pixel_ray, Vec3};
use crate::scene::StereoRig;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriangulationError {
    #[error("verge angle is zero; the optical axes never cross")]
    ParallelCameras,
    #[error("disparity denominator vanishes; point at infinity")]
    PointAtInfinity,
    #[error("depth formula needs a shared focal length (left {left}, right {right})")]
    MismatchedFocal { left: f64, right: f64 },
    #[error("back-projected rays are parallel")]
    ParallelRays,
    #[error("label sets differ between the two views: {0}")]
    LabelMismatch(String),
    #[error("need at least 3 labeled points, got {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriangulationMethod {
    /// Closed-form verged-stereo depth formula.
    #[default]
    Eq1,
    /// Exact ray-midpoint intersection.
    Rays,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPixel {
    pub label: String,
    /// Principal-point-relative pixel coordinates.
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub label: String,
    pub point: Vec3,
}

/// Depth at which the two optical axes cross, `b / tan(θ)`.
pub fn z0(rig: &StereoRig) -> Result<f64, TriangulationError> {
    if rig.theta == 0.0 {
        return Err(TriangulationError::ParallelCameras);
    }
    Ok(rig.baseline / rig.theta.tan())
}

/// `Z = b·f / (x1 − x2 + f·b/Z0)`, `X = x1·Z/f`, `Y = y1·Z/f`. At θ = 0 the
/// `f·b/Z0` term takes its parallel limit of zero.
pub fn triangulate_eq1(rig: &StereoRig, p1: (f64, f64), p2: (f64, f64)) -> Result<Vec3, TriangulationError> {
    let f = rig.left.f;
    if rig.right.f != f {
        return Err(TriangulationError::MismatchedFocal { left: f, right: rig.right.f });
    }
    let b = rig.baseline;
    let verge_term = match z0(rig) {
        Ok(z0) => f * b / z0,
        Err(_) => 0.0,
    };
    let denom = p1.0 - p2.0 + verge_term;
    if denom.abs() <= 1e-9 {
        return Err(TriangulationError::PointAtInfinity);
    }
    let z = b * f / denom;
    Ok(Vec3::new(p1.0 * z / f, p1.1 * z / f, z))
}

/// Midpoint of the shortest segment between the two viewing rays.
pub fn triangulate_rays(rig: &StereoRig, p1: (f64, f64), p2: (f64, f64)) -> Result<Vec3, TriangulationError> {
    let cam2 = rig.cam1_from_cam2();
    let o1 = Vec3::zeros();
    let d1 = pixel_ray(&rig.left, p1.0, p1.1);
    let o2 = cam2.translation;
    let d2 = cam2.apply_vector(&pixel_ray(&rig.right, p2.0, p2.1));
    let w0 = o1 - o2;
    let (a, b, c) = (d1.dot(&d1), d1.dot(&d2), d2.dot(&d2));
    let (d, e) = (d1.dot(&w0), d2.dot(&w0));
    let denom = a * c - b * b;
    if denom <= 1e-14 * a * c {
        return Err(TriangulationError::ParallelRays);
    }
    let s = (b * e - c * d) / denom;
    let t = (a * e - b * d) / denom;
    Ok(((o1 + d1 * s) + (o2 + d2 * t)) * 0.5)
}

pub fn triangulate(rig: &StereoRig, p1: (f64, f64), p2: (f64, f64), method: TriangulationMethod) -> Result<Vec3, TriangulationError> {
    match method {
        TriangulationMethod::Eq1 => triangulate_eq1(rig, p1, p2),
        TriangulationMethod::Rays => triangulate_rays(rig, p1, p2),
    }
}

/// Triangulates every label present in both views, in the order of `matches1`.
pub fn triangulate_port_points(
    rig: &StereoRig,
    matches1: &[LabeledPixel],
    matches2: &[LabeledPixel],
    method: TriangulationMethod,
) -> Result<Vec<LabeledPoint>, TriangulationError> {
    let second: HashMap<&str, &LabeledPixel> = matches2.iter().map(|m| (m.label.as_str(), m)).collect();
    let first: HashMap<&str, &LabeledPixel> = matches1.iter().map(|m| (m.label.as_str(), m)).collect();
    if first.len() != matches1.len() || second.len() != matches2.len() {
        return Err(TriangulationError::LabelMismatch("duplicate label".into()));
    }
    if let Some(missing) = matches1.iter().find(|m| !second.contains_key(m.label.as_str())) {
        return Err(TriangulationError::LabelMismatch(format!("{} missing from view 2", missing.label)));
    }
    if let Some(extra) = matches2.iter().find(|m| !first.contains_key(m.label.as_str())) {
        return Err(TriangulationError::LabelMismatch(format!("{} missing from view 1", extra.label)));
    }
    if matches1.len() < 3 {
        return Err(TriangulationError::TooFewPoints(matches1.len()));
    }
    matches1
        .iter()
        .map(|m1| {
            let m2 = second[m1.label.as_str()];
            let point = triangulate(rig, (m1.x, m1.y), (m2.x, m2.y), method)?;
            Ok(LabeledPoint { label: m1.label.clone(), point })
        })
        .collect()
}

/// Regular `n × n × n` grid of camera-1 points spanning the given box.
pub fn working_volume_grid(n: usize, x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Vec<Vec3> {
    let lerp = |(lo, hi): (f64, f64), i: usize| if n < 2 { 0.5 * (lo + hi) } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 };
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push(Vec3::new(lerp(x, i), lerp(y, j), lerp(z, k)));
            }
        }
    }
    out
}

/// Gap between the closed-form depth formula and the exact ray
/// intersection over a set of points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eq1Deviation {
    pub theta: f64,
    pub max: f64,
    pub mean: f64,
}

/// Projects every point (camera-1 frame) through `rig` and compares the two
/// triangulations.
pub fn eq1_deviation(rig: &StereoRig, points: &[Vec3]) -> Result<Eq1Deviation, TriangulationError> {
    let (mut max, mut sum) = (0.0f64, 0.0);
    let cam2_from_cam1 = rig.cam1_from_cam2().inverse();
    for p in points {
        let a = crate::geometry::project_pinhole(&rig.left, p).map_err(|_| TriangulationError::PointAtInfinity)?;
        let b = crate::geometry::project_pinhole(&rig.right, &cam2_from_cam1.apply(p)).map_err(|_| TriangulationError::PointAtInfinity)?;
        let d = (triangulate_eq1(rig, a, b)? - triangulate_rays(rig, a, b)?).norm();
        max = max.max(d);
        sum += d;
    }
    Ok(Eq1Deviation { theta: rig.theta, max, mean: sum / points.len().max(1) as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Transform3D};
    use proptest::prelude::*;

    fn rig(theta_deg: f64, b: f64, f: f64) -> StereoRig {
        let intr = CameraIntrinsics::centered(f, 1024, 768).unwrap();
        StereoRig::new(intr, intr, b, theta_deg.to_radians(), Transform3D::identity()).unwrap()
    }

    #[test]
    fn z0_values() {
        let z = z0(&rig(5.0, 0.1, 1000.0)).unwrap();
        assert!((z - 0.1 / 5f64.to_radians().tan()).abs() < 1e-15);
        assert!((z - 1.1430052302761343).abs() < 1e-12);
        // Cross-check: intersect the two optical axes.
        let r = rig(5.0, 0.1, 1000.0);
        let crossing = triangulate_rays(&r, (0.0, 0.0), (0.0, 0.0)).unwrap();
        assert!((crossing.z - z).abs() < 1e-12 && crossing.x.abs() < 1e-12);
        assert!((z0(&rig(45.0, 0.1, 1000.0)).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(z0(&rig(0.0, 0.1, 1000.0)), Err(TriangulationError::ParallelCameras));
    }

    #[test]
    fn eq1_parallel_limit() {
        let r = rig(0.0, 0.1, 1000.0);
        let p = triangulate_eq1(&r, (50.0, 0.0), (-50.0, 0.0)).unwrap();
        assert!((p - Vec3::new(0.05, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn eq1_point_at_infinity() {
        let r = rig(5.0, 0.1, 1000.0);
        let k = 1000.0 * 0.1 / z0(&r).unwrap();
        assert_eq!(triangulate_eq1(&r, (10.0, 0.0), (10.0 + k, 0.0)), Err(TriangulationError::PointAtInfinity));
    }

    #[test]
    fn eq1_mismatched_focal() {
        let mut r = rig(5.0, 0.1, 1000.0);
        r.right.f = 1001.0;
        assert!(matches!(triangulate_eq1(&r, (0.0, 0.0), (0.0, 0.0)), Err(TriangulationError::MismatchedFocal { .. })));
    }

    #[test]
    fn eq1_model_gap_shrinks_with_verge() {
        let p = Vec3::new(0.03, -0.02, 1.0);
        let gap = |deg: f64| {
            let r = rig(deg, 0.1, 1000.0);
            let (a, b) = r.project(&p).unwrap();
            (triangulate_eq1(&r, a, b).unwrap() - triangulate_rays(&r, a, b).unwrap()).norm()
        };
        assert!(gap(0.0) < 1e-12);
        assert!(gap(0.5) < gap(2.0) && gap(2.0) < gap(5.0));
    }

    #[test]
    fn rays_sensitivity_bound() {
        let r = rig(0.0, 0.1, 1000.0);
        let p = Vec3::new(0.0, 0.0, 1.0);
        let (a, b) = r.project(&p).unwrap();
        let mut prev = triangulate_rays(&r, a, b).unwrap();
        for k in 1..=10 {
            let shifted = triangulate_rays(&r, a, (b.0 + 0.05 * k as f64, b.1)).unwrap();
            // Continuous: small steps move the result by small amounts.
            assert!((shifted - prev).norm() < 1e-3);
            prev = shifted;
        }
        // Parallel-rig oracle: a 0.5 px disparity loss gives Z = b·f / (d − 0.5).
        assert!((prev.z - 100.0 / 99.5).abs() < 1e-9, "depth {}", prev.z);
        assert!((prev - p).norm() < 5.1e-3);
    }

    #[test]
    fn grid_covers_box() {
        let g = working_volume_grid(10, (-0.1, 0.1), (-0.05, 0.05), (0.5, 0.8));
        assert_eq!(g.len(), 1000);
        assert_eq!(g[0], Vec3::new(-0.1, -0.05, 0.5));
        assert_eq!(g[999], Vec3::new(0.1, 0.05, 0.8));
    }

    #[test]
    fn eq1_deviation_vanishes_at_zero_verge() {
        let g = working_volume_grid(5, (-0.1, 0.1), (-0.05, 0.05), (0.5, 0.8));
        let dev = |deg: f64| eq1_deviation(&rig(deg, 0.2, 1600.0), &g).unwrap().max;
        assert!(dev(0.0) < 1e-12);
        assert!(dev(1.0) < dev(3.0) && dev(3.0) < dev(5.0));
        assert!((dev(1.0) - dev(1.001)).abs() < 1e-3 * dev(1.0));
    }

    #[test]
    fn rays_parallel() {
        let r = rig(0.0, 0.1, 1000.0);
        assert_eq!(triangulate_rays(&r, (10.0, 5.0), (10.0, 5.0)), Err(TriangulationError::ParallelRays));
    }

    #[test]
    fn port_point_labels() {
        let r = rig(5.0, 0.1, 1000.0);
        let px = |l: &str, x: f64| LabeledPixel { label: l.into(), x, y: 0.0 };
        let m1 = vec![px("a", 1.0), px("b", 2.0), px("c", 3.0)];
        let m2 = vec![px("a", -50.0), px("b", -49.0), px("d", -48.0)];
        assert!(matches!(triangulate_port_points(&r, &m1, &m2, TriangulationMethod::Rays), Err(TriangulationError::LabelMismatch(_))));
        assert_eq!(triangulate_port_points(&r, &m1[..2], &m2[..2], TriangulationMethod::Rays), Err(TriangulationError::TooFewPoints(2)));
    }

    proptest! {
        #[test]
        fn rays_invert_projection(x in -0.2f64..0.2, y in -0.15f64..0.15, z in 0.5f64..2.0, theta in 0.0f64..10.0) {
            let r = rig(theta, 0.1, 1000.0);
            let p = Vec3::new(x, y, z);
            let (a, b) = r.project(&p).unwrap();
            let q = triangulate_rays(&r, a, b).unwrap();
            prop_assert!((q - p).norm() < 1e-9);
        }

        #[test]
        fn vertical_shift_keeps_x_and_z(dy in -50.0f64..50.0, x1 in -100.0f64..100.0, d in 20.0f64..200.0) {
            let r = rig(3.0, 0.1, 1000.0);
            let a = triangulate_eq1(&r, (x1, 0.0), (x1 - d, 0.0)).unwrap();
            let b = triangulate_eq1(&r, (x1, dy), (x1 - d, dy)).unwrap();
            prop_assert!((a.x - b.x).abs() < 1e-12 && (a.z - b.z).abs() < 1e-12);
            prop_assert!((b.y - dy * b.z / 1000.0).abs() < 1e-12);
        }
    }
}
