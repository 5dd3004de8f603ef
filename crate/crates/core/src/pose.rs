//! Port pose from labeled 3D points: a least-squares plane `z = Ax + By + C`
//! gives the out-of-plane orientation, a 2D Procrustes registration of the
//! pins inside that plane gives the yaw.

use crate::geometry::{Rotation3, Transform3D, Vec3};
use crate::scene::PortModel;
use crate::triangulation::LabeledPoint;
use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest accepted condition number of the normal-equation matrix.
pub const MAX_CONDITION: f64 = 1e12;
/// Smallest accepted `|n·ẑ|` for the `z = Ax + By + C` parameterization.
pub const MIN_NORMAL_Z: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("points are collinear or duplicated in the (x, y) projection")]
    DegenerateConfiguration,
    #[error("plane is too close to vertical for z = Ax + By + C (|n·z| = {0:.4})")]
    NearVerticalPlane(f64),
    #[error("need at least 3 labeled points, got {0}")]
    TooFewPoints(usize),
    #[error("label {0:?} is not a pin of the model")]
    UnknownLabel(String),
    #[error("in-plane registration is ambiguous and no fallback yaw was given")]
    AmbiguousYaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct PlaneFit {
    pub A: f64,
    pub B: f64,
    pub C: f64,
    pub rms_residual: f64,
}

impl PlaneFit {
    /// Unit normal oriented toward the camera (`n·ẑ < 0`).
    pub fn normal(&self) -> Vec3 {
        Vec3::new(self.A, self.B, -1.0).normalize()
    }

    /// Sum of squared vertical residuals.
    pub fn sse(&self, points: &[Vec3]) -> f64 {
        plane_sse(self.A, self.B, self.C, points)
    }
}

pub fn plane_sse(a: f64, b: f64, c: f64, points: &[Vec3]) -> f64 {
    points.iter().map(|p| (a * p.x + b * p.y + c - p.z).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortPoseEstimate {
    /// Port pose in the camera frame.
    pub pose: Transform3D,
    pub labels: Vec<String>,
    pub per_pin_residual: Vec<f64>,
    pub plane: PlaneFit,
    /// True when the fallback yaw decided the registration.
    pub used_fallback_yaw: bool,
}

/// Solves the 3×3 normal equations of `Σ (Ax + By + C − z)²`.
pub fn fit_plane_lsq(points: &[Vec3]) -> Result<PlaneFit, PoseError> {
    if points.len() < 3 {
        return Err(PoseError::TooFewPoints(points.len()));
    }
    let mut m = Matrix3::zeros();
    let mut rhs = Vec3::zeros();
    for p in points {
        let row = Vec3::new(p.x, p.y, 1.0);
        m += row * row.transpose();
        rhs += row * p.z;
    }
    let eig = SymmetricEigen::new(m).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo >= MAX_CONDITION {
        return Err(PoseError::DegenerateConfiguration);
    }
    let sol = m.cholesky().ok_or(PoseError::DegenerateConfiguration)?.solve(&rhs);
    let (a, b, c) = (sol.x, sol.y, sol.z);
    let nz = 1.0 / (a * a + b * b + 1.0).sqrt();
    if nz < MIN_NORMAL_Z {
        return Err(PoseError::NearVerticalPlane(nz));
    }
    let rms_residual = (plane_sse(a, b, c, points) / points.len() as f64).sqrt();
    Ok(PlaneFit { A: a, B: b, C: c, rms_residual })
}

/// `(roll, pitch)` of the rotation `Ry(pitch)·Rx(roll)` taking `ẑ` to `−n`.
pub fn plane_to_roll_pitch(fit: &PlaneFit) -> (f64, f64) {
    let m = -fit.normal();
    let roll = (-m.y).atan2(m.x.hypot(m.z));
    let pitch = m.x.atan2(m.z);
    (roll, pitch)
}

struct Candidate {
    rotation: Rotation3,
    score: f64,
}

/// 6-DOF port pose in the frame of `points`. `fallback_yaw`, when given,
/// breaks ties of an ambiguous in-plane registration: the candidate whose
/// in-plane rotation is closest to it wins.
pub fn estimate_port_pose(points: &[LabeledPoint], model: &PortModel, fallback_yaw: Option<f64>) -> Result<PortPoseEstimate, PoseError> {
    if points.len() < 3 {
        return Err(PoseError::TooFewPoints(points.len()));
    }
    let mut model_pts = Vec::with_capacity(points.len());
    for p in points {
        let pin = model.pin(&p.label).ok_or_else(|| PoseError::UnknownLabel(p.label.clone()))?;
        model_pts.push(pin.center);
    }
    let obs: Vec<Vec3> = points.iter().map(|p| p.point).collect();
    let plane = fit_plane_lsq(&obs)?;
    let (roll, pitch) = plane_to_roll_pitch(&plane);
    let base = Rotation3::rot_y(pitch).mul(&Rotation3::rot_x(roll));

    let n = obs.len() as f64;
    let c_obs = obs.iter().sum::<Vec3>() / n;
    let c_model = model_pts.iter().sum::<Vec3>() / n;
    let model_spread: f64 = model_pts.iter().map(|m| (m - c_model).xy().norm_squared()).sum();

    let candidates: Vec<Candidate> = [base, base.mul(&Rotation3::rot_x(std::f64::consts::PI))]
        .into_iter()
        .map(|frame| {
            let (mut sc, mut ss) = (0.0, 0.0);
            for (o, m) in obs.iter().zip(&model_pts) {
                let q = frame.inverse().apply(&(o - c_obs));
                let r = m - c_model;
                sc += r.x * q.x + r.y * q.y;
                ss += r.x * q.y - r.y * q.x;
            }
            let yaw = ss.atan2(sc);
            Candidate { rotation: frame.mul(&Rotation3::rot_z(yaw)), score: sc.hypot(ss) }
        })
        .collect();

    let (rotation, used_fallback_yaw) = resolve_candidates(&candidates, 1e-6 * model_spread.max(f64::MIN_POSITIVE), fallback_yaw)?;
    let translation = c_obs - rotation.apply(&c_model);
    let pose = Transform3D::new(rotation, translation);
    let per_pin_residual = obs.iter().zip(&model_pts).map(|(o, m)| (pose.apply(m) - o).norm()).collect();
    Ok(PortPoseEstimate {
        pose,
        labels: points.iter().map(|p| p.label.clone()).collect(),
        per_pin_residual,
        plane,
        used_fallback_yaw,
    })
}

/// Picks the better-scoring face orientation; scores within `tie` count as
/// ambiguous and defer to the fallback yaw.
fn resolve_candidates(candidates: &[Candidate], tie: f64, fallback_yaw: Option<f64>) -> Result<(Rotation3, bool), PoseError> {
    let (a, b) = (&candidates[0], &candidates[1]);
    if (a.score - b.score).abs() > tie && a.score.max(b.score) > tie {
        let best = if b.score > a.score { b } else { a };
        return Ok((best.rotation, false));
    }
    let yaw = fallback_yaw.ok_or(PoseError::AmbiguousYaw)?;
    // In-plane angle of a candidate's x axis as seen along the optical axis.
    let dist = |c: &Candidate| {
        let x = c.rotation.apply(&Vec3::x());
        crate::geometry::wrap_angle(x.y.atan2(x.x) - yaw).abs()
    };
    let best = if dist(b) < dist(a) { b } else { a };
    Ok((best.rotation, true))
}
