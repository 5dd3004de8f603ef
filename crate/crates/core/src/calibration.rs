//! Eye-to-hand calibration as the AX = YB problem:
//! `T_base_flange(i) · T_flange_tip = T_base_cam · T_cam_tip(i)`.

use crate::geometry::{skew, Rotation3, Transform3D, Vec3};
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MIN_SCORE: f64 = 0.9;
/// Minimum angle between relative rotation axes for a well-posed problem.
pub const MIN_AXIS_SEPARATION: f64 = 5.0 * std::f64::consts::PI / 180.0;
/// Meters per radian used to weigh rotation residuals against translation.
pub const ROTATION_WEIGHT: f64 = 0.02;
pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("need at least 3 pose pairs, got {0}")]
    TooFewPoses(usize),
    #[error("flange rotation axes are effectively parallel")]
    DegenerateMotion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePair {
    #[serde(rename = "T_base_flange")]
    pub base_from_flange: Transform3D,
    #[serde(rename = "T_cam_tip")]
    pub cam_from_tip: Transform3D,
    pub match_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairResidual {
    pub rot: f64,
    pub trans: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    #[serde(rename = "T_base_cam")]
    pub base_from_cam: Transform3D,
    #[serde(rename = "T_flange_tip")]
    pub flange_from_tip: Transform3D,
    pub per_pair_residual: Vec<PairResidual>,
    pub mean_translation_error: f64,
    pub iterations: usize,
}

/// Splits pairs by `match_score >= min_score`, preserving order.
pub fn reject_outliers(pairs: &[PosePair], min_score: f64) -> (Vec<PosePair>, Vec<PosePair>) {
    pairs.iter().cloned().partition(|p| p.match_score >= min_score)
}

/// Object pose in the robot base frame.
pub fn apply_calibration(result: &CalibrationResult, cam_from_object: &Transform3D) -> Transform3D {
    result.base_from_cam.compose(cam_from_object)
}

pub fn calibrate(pairs: &[PosePair]) -> Result<CalibrationResult, CalibrationError> {
    if pairs.len() < 3 {
        return Err(CalibrationError::TooFewPoses(pairs.len()));
    }
    let motions = relative_motions(pairs);
    check_motion(&motions)?;
    let r_x = tsai_lenz_rotation(&motions)?;
    let r_y = Rotation3::project(
        pairs
            .iter()
            .map(|p| p.base_from_flange.rotation.matrix() * r_x.matrix() * p.cam_from_tip.rotation.matrix().transpose())
            .sum(),
    );
    let (t_x, t_y) = solve_translations(pairs, &r_y);
    let x0 = Transform3D::new(r_x, t_x);
    let y0 = Transform3D::new(r_y, t_y);
    let (x, y, iterations) = refine(pairs, x0, y0);
    let per_pair_residual = residuals(pairs, &x, &y);
    let mean_translation_error = per_pair_residual.iter().map(|r| r.trans).sum::<f64>() / pairs.len() as f64;
    Ok(CalibrationResult { base_from_cam: y, flange_from_tip: x, per_pair_residual, mean_translation_error, iterations })
}

/// Per-pair discrepancy between `A·X` and `Y·B`.
pub fn residuals(pairs: &[PosePair], flange_from_tip: &Transform3D, base_from_cam: &Transform3D) -> Vec<PairResidual> {
    pairs
        .iter()
        .map(|p| {
            let lhs = p.base_from_flange.compose(flange_from_tip);
            let rhs = base_from_cam.compose(&p.cam_from_tip);
            let (rot, trans) = lhs.distance(&rhs);
            PairResidual { rot, trans }
        })
        .collect()
}

/// Weighted sum of squared residuals minimized by the refinement.
pub fn cost(pairs: &[PosePair], flange_from_tip: &Transform3D, base_from_cam: &Transform3D) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let (r, t) = pair_residual(p, flange_from_tip, base_from_cam);
            (r * ROTATION_WEIGHT).norm_squared() + t.norm_squared()
        })
        .sum()
}

/// Relative motions `(A_j⁻¹ A_i, B_j⁻¹ B_i)` over all pairs `i < j`.
fn relative_motions(pairs: &[PosePair]) -> Vec<(Transform3D, Transform3D)> {
    let mut out = Vec::with_capacity(pairs.len() * (pairs.len() - 1) / 2);
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            let a = pairs[j].base_from_flange.inverse().compose(&pairs[i].base_from_flange);
            let b = pairs[j].cam_from_tip.inverse().compose(&pairs[i].cam_from_tip);
            out.push((a, b));
        }
    }
    out
}

fn check_motion(motions: &[(Transform3D, Transform3D)]) -> Result<(), CalibrationError> {
    let axes: Vec<Vec3> = motions
        .iter()
        .filter_map(|(a, _)| {
            let w = a.rotation.log();
            (w.norm() > 1e-3).then(|| w.normalize())
        })
        .collect();
    let Some(first) = axes.first() else {
        return Err(CalibrationError::DegenerateMotion);
    };
    let spread = axes.iter().map(|a| a.dot(first).abs().clamp(0.0, 1.0).acos()).fold(0.0, f64::max);
    if spread <= MIN_AXIS_SEPARATION {
        return Err(CalibrationError::DegenerateMotion);
    }
    Ok(())
}

/// Tsai–Lenz rotation of `X` from `R_A·R_X = R_X·R_B` over relative motions,
/// using modified Rodrigues vectors `2·sin(θ/2)·k`.
fn tsai_lenz_rotation(motions: &[(Transform3D, Transform3D)]) -> Result<Rotation3, CalibrationError> {
    let rodrigues = |r: &Rotation3| {
        let w = r.log();
        let th = w.norm();
        if th < 1e-15 {
            Vec3::zeros()
        } else {
            w * (2.0 * (th / 2.0).sin() / th)
        }
    };
    let mut m = DMatrix::zeros(3 * motions.len(), 3);
    let mut rhs = DVector::zeros(3 * motions.len());
    for (k, (a, b)) in motions.iter().enumerate() {
        let pa = rodrigues(&a.rotation);
        let pb = rodrigues(&b.rotation);
        m.fixed_view_mut::<3, 3>(3 * k, 0).copy_from(&skew(&(pa + pb)));
        rhs.fixed_rows_mut::<3>(3 * k).copy_from(&(pb - pa));
    }
    let sol = m.svd(true, true).solve(&rhs, 1e-12).map_err(|_| CalibrationError::DegenerateMotion)?;
    let p_prime = Vec3::new(sol[0], sol[1], sol[2]);
    let p = p_prime * (2.0 / (1.0 + p_prime.norm_squared()).sqrt());
    let n2 = p.norm_squared();
    let r = Matrix3::identity() * (1.0 - n2 / 2.0) + (p * p.transpose() + skew(&p) * (4.0 - n2).max(0.0).sqrt()) * 0.5;
    Ok(Rotation3::project(r))
}

/// Joint least squares for `R_Ai·tX − tY = R_Y·tBi − tAi`.
fn solve_translations(pairs: &[PosePair], r_y: &Rotation3) -> (Vec3, Vec3) {
    let mut m = DMatrix::zeros(3 * pairs.len(), 6);
    let mut rhs = DVector::zeros(3 * pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        m.fixed_view_mut::<3, 3>(3 * k, 0).copy_from(p.base_from_flange.rotation.matrix());
        m.fixed_view_mut::<3, 3>(3 * k, 3).copy_from(&-Matrix3::identity());
        let r = r_y.apply(&p.cam_from_tip.translation) - p.base_from_flange.translation;
        rhs.fixed_rows_mut::<3>(3 * k).copy_from(&r);
    }
    let sol = m.svd(true, true).solve(&rhs, 1e-12).expect("svd solve");
    (Vec3::new(sol[0], sol[1], sol[2]), Vec3::new(sol[3], sol[4], sol[5]))
}

/// Rotation residual `log(R_A R_X R_Bᵀ R_Yᵀ)` and translation residual.
fn pair_residual(p: &PosePair, x: &Transform3D, y: &Transform3D) -> (Vec3, Vec3) {
    let ra = p.base_from_flange.rotation.matrix();
    let rb = p.cam_from_tip.rotation.matrix();
    let e = Rotation3::project(ra * x.rotation.matrix() * rb.transpose() * y.rotation.matrix().transpose());
    let t = p.base_from_flange.apply(&x.translation) - y.apply(&p.cam_from_tip.translation);
    (e.log(), t)
}

/// Gauss-Newton over `(δθ_X, δt_X, δθ_Y, δt_Y)` with rotations updated as
/// `R ← exp(δθ)·R`.
fn refine(pairs: &[PosePair], mut x: Transform3D, mut y: Transform3D) -> (Transform3D, Transform3D, usize) {
    let w = ROTATION_WEIGHT;
    for it in 1..=MAX_ITERATIONS {
        let mut jtj = SMatrix::<f64, 12, 12>::zeros();
        let mut jtr = SVector::<f64, 12>::zeros();
        for p in pairs {
            let (r_rot, r_t) = pair_residual(p, &x, &y);
            let ra = p.base_from_flange.rotation.matrix();
            let mut j = SMatrix::<f64, 6, 12>::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(ra * w));
            j.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-Matrix3::identity() * w));
            j.fixed_view_mut::<3, 3>(3, 3).copy_from(ra);
            j.fixed_view_mut::<3, 3>(3, 6).copy_from(&skew(&y.rotation.apply(&p.cam_from_tip.translation)));
            j.fixed_view_mut::<3, 3>(3, 9).copy_from(&-Matrix3::identity());
            let mut r = SVector::<f64, 6>::zeros();
            r.fixed_rows_mut::<3>(0).copy_from(&(r_rot * w));
            r.fixed_rows_mut::<3>(3).copy_from(&r_t);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(chol) = jtj.cholesky() else {
            return (x, y, it);
        };
        let step = -chol.solve(&jtr);
        let dx_rot = Vec3::new(step[0], step[1], step[2]);
        let dx_t = Vec3::new(step[3], step[4], step[5]);
        let dy_rot = Vec3::new(step[6], step[7], step[8]);
        let dy_t = Vec3::new(step[9], step[10], step[11]);
        x = Transform3D::new(Rotation3::exp(&dx_rot).mul(&x.rotation), x.translation + dx_t);
        y = Transform3D::new(Rotation3::exp(&dy_rot).mul(&y.rotation), y.translation + dy_t);
        if step.norm() < STEP_TOLERANCE {
            return (x, y, it);
        }
    }
    (x, y, MAX_ITERATIONS)
}
