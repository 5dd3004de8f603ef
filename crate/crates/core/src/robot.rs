//! Six-joint serial arm: standard DH kinematics, damped least-squares IK and
//! a velocity-command stepping simulator.

use crate::geometry::{Rotation3, Transform3D, Vec3};
use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Joints = Vector6<f64>;

/// Control period of the velocity controller (125 Hz).
pub const CONTROL_PERIOD: f64 = 0.008;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobotError {
    #[error("joint {joint} value {value:.6} outside limits [{lo:.6}, {hi:.6}]")]
    JointLimit { joint: usize, value: f64, lo: f64, hi: f64 },
    #[error("inverse kinematics did not converge (position error {pos_err:.3e} m, rotation error {rot_err:.3e} rad)")]
    NoConvergence { pos_err: f64, rot_err: f64 },
    #[error("target at {distance:.3} m from the shoulder exceeds reach {reach:.3} m")]
    Unreachable { distance: f64, reach: f64 },
    #[error("invalid kinematic chain: {0}")]
    InvalidChain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhJoint {
    pub d: f64,
    pub a: f64,
    pub alpha: f64,
    pub theta_offset: f64,
    pub limits: [f64; 2],
    /// rad/s
    pub max_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhChain {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub joints: Vec<DhJoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub t: f64,
    pub q: Joints,
    pub qdot: Joints,
}

impl JointState {
    pub fn at_rest(q: Joints) -> Self {
        Self { t: 0.0, q, qdot: Joints::zeros() }
    }
}

fn link_transform(j: &DhJoint, q: f64) -> Transform3D {
    let theta = q + j.theta_offset;
    // Rz(theta) * Tz(d) * Tx(a) * Rx(alpha)
    let rz = Transform3D::new(Rotation3::rot_z(theta), Vec3::new(0.0, 0.0, j.d));
    let rx = Transform3D::new(Rotation3::rot_x(j.alpha), Vec3::new(j.a, 0.0, 0.0));
    rz.compose(&rx)
}

impl DhChain {
    pub fn validate(&self) -> Result<(), RobotError> {
        if self.joints.len() != 6 {
            return Err(RobotError::InvalidChain(format!("expected 6 joints, found {}", self.joints.len())));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.limits[0] < j.limits[1]) {
                return Err(RobotError::InvalidChain(format!("joint {i} limits are not increasing")));
            }
            if !(j.max_speed > 0.0) {
                return Err(RobotError::InvalidChain(format!("joint {i} max speed must be positive")));
            }
        }
        Ok(())
    }

    pub fn check_limits(&self, q: &Joints) -> Result<(), RobotError> {
        for (i, j) in self.joints.iter().enumerate() {
            if !(q[i] >= j.limits[0] && q[i] <= j.limits[1]) {
                return Err(RobotError::JointLimit { joint: i, value: q[i], lo: j.limits[0], hi: j.limits[1] });
            }
        }
        Ok(())
    }

    pub fn max_speeds(&self) -> Joints {
        Joints::from_iterator(self.joints.iter().map(|j| j.max_speed))
    }

    /// Frames 0..=6: the base followed by the frame after each joint.
    pub fn link_frames(&self, q: &Joints) -> [Transform3D; 7] {
        let mut frames = [Transform3D::identity(); 7];
        for i in 0..6 {
            frames[i + 1] = frames[i].compose(&link_transform(&self.joints[i], q[i]));
        }
        frames
    }

    /// Upper bound on the distance from the shoulder to the flange origin.
    pub fn reach(&self) -> f64 {
        self.joints[1..].iter().map(|j| j.a.abs() + j.d.abs()).sum()
    }

    pub fn shoulder(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.joints[0].d)
    }

    fn wrap_into_limits(&self, q: &mut Joints) {
        use std::f64::consts::TAU;
        for (i, j) in self.joints.iter().enumerate() {
            while q[i] > j.limits[1] && q[i] - TAU >= j.limits[0] {
                q[i] -= TAU;
            }
            while q[i] < j.limits[0] && q[i] + TAU <= j.limits[1] {
                q[i] += TAU;
            }
        }
    }
}

/// Flange pose in the base frame.
pub fn forward_kinematics(chain: &DhChain, q: &Joints) -> Result<Transform3D, RobotError> {
    chain.check_limits(q)?;
    Ok(chain.link_frames(q)[6])
}

/// Geometric Jacobian at the flange origin: rows 0..3 linear, 3..6 angular
/// velocity, both in the base frame.
pub fn jacobian(chain: &DhChain, q: &Joints) -> Result<Matrix6<f64>, RobotError> {
    chain.check_limits(q)?;
    Ok(jacobian_unchecked(chain, q))
}

fn jacobian_unchecked(chain: &DhChain, q: &Joints) -> Matrix6<f64> {
    let frames = chain.link_frames(q);
    let p_end = frames[6].translation;
    let mut j = Matrix6::zeros();
    for i in 0..6 {
        let z = frames[i].axis(2);
        let lin = z.cross(&(p_end - frames[i].translation));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

/// Ratio of largest to smallest singular value (infinite when rank-deficient).
pub fn condition_number(j: &Matrix6<f64>) -> f64 {
    let sv = j.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Threshold above which a configuration is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkOptions {
    pub position_tolerance: f64,
    pub rotation_tolerance: f64,
    pub max_iterations: usize,
    pub damping: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self { position_tolerance: 1e-9, rotation_tolerance: 1e-9, max_iterations: 500, damping: 0.01 }
    }
}

fn pose_error(current: &Transform3D, target: &Transform3D) -> Vector6<f64> {
    let dp = target.translation - current.translation;
    let dr = target.rotation.mul(&current.rotation.inverse()).log();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// Damped least-squares IK from `seed`, with the damping doubled whenever a
/// step fails to reduce the error.
pub fn inverse_kinematics(chain: &DhChain, target: &Transform3D, seed: &Joints) -> Result<Joints, RobotError> {
    inverse_kinematics_with(chain, target, seed, &IkOptions::default())
}

pub fn inverse_kinematics_with(chain: &DhChain, target: &Transform3D, seed: &Joints, opts: &IkOptions) -> Result<Joints, RobotError> {
    let distance = (target.translation - chain.shoulder()).norm();
    let reach = chain.reach();
    if distance > reach {
        return Err(RobotError::Unreachable { distance, reach });
    }
    let mut q = *seed;
    chain.wrap_into_limits(&mut q);
    let mut err = pose_error(&chain.link_frames(&q)[6], target);
    let mut lambda = opts.damping;
    let converged = |e: &Vector6<f64>| {
        e.fixed_rows::<3>(0).norm() < opts.position_tolerance && e.fixed_rows::<3>(3).norm() < opts.rotation_tolerance
    };
    for _ in 0..opts.max_iterations {
        if converged(&err) {
            chain.check_limits(&q)?;
            return Ok(q);
        }
        let j = jacobian_unchecked(chain, &q);
        let jjt = j * j.transpose() + Matrix6::identity() * (lambda * lambda);
        let Some(step) = jjt.cholesky().map(|c| j.transpose() * c.solve(&err)) else {
            lambda *= 2.0;
            continue;
        };
        let mut candidate = q + step;
        chain.wrap_into_limits(&mut candidate);
        let cand_err = pose_error(&chain.link_frames(&candidate)[6], target);
        if cand_err.norm() < err.norm() {
            q = candidate;
            err = cand_err;
            lambda = (lambda * 0.5).max(opts.damping * 1e-3);
        } else {
            lambda *= 2.0;
            if lambda > 1e6 {
                break;
            }
        }
    }
    if converged(&err) {
        chain.check_limits(&q)?;
        return Ok(q);
    }
    Err(RobotError::NoConvergence { pos_err: err.fixed_rows::<3>(0).norm(), rot_err: err.fixed_rows::<3>(3).norm() })
}

/// Advances the arm by one control period under a joint velocity command.
/// Commands are clamped to `speed_fraction` of each joint's max speed; the
/// integration is exact for piecewise-constant velocities.
pub fn velocity_step(chain: &DhChain, state: &JointState, qdot_cmd: &Joints, dt: f64, speed_fraction: f64) -> JointState {
    assert!(dt > 0.0, "control period must be positive");
    let fraction = speed_fraction.clamp(0.0, 1.0);
    let mut qdot = Joints::zeros();
    let mut q = state.q;
    for (i, j) in chain.joints.iter().enumerate() {
        let limit = j.max_speed * fraction;
        qdot[i] = qdot_cmd[i].clamp(-limit, limit);
        let next = q[i] + qdot[i] * dt;
        if next > j.limits[1] || next < j.limits[0] {
            qdot[i] = 0.0;
        } else {
            q[i] = next;
        }
    }
    JointState { t: state.t + dt, q, qdot }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn chain() -> DhChain {
        assets::ur10_chain().unwrap()
    }

    fn random_q(rng: &mut impl Rng) -> Joints {
        Joints::from_fn(|_, _| rng.random_range(-PI..PI))
    }

    /// Independent DH product built from explicit 4x4 matrices.
    fn dh_oracle(chain: &DhChain, q: &Joints) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        for (i, j) in chain.joints.iter().enumerate() {
            let (st, ct) = (q[i] + j.theta_offset).sin_cos();
            let (sa, ca) = j.alpha.sin_cos();
            #[rustfmt::skip]
            let a = nalgebra::Matrix4::new(
                ct, -st * ca, st * sa, j.a * ct,
                st, ct * ca, -ct * sa, j.a * st,
                0.0, sa, ca, j.d,
                0.0, 0.0, 0.0, 1.0,
            );
            m *= a;
        }
        m
    }

    #[test]
    fn fk_matches_dh_oracle() {
        let c = chain();
        let zero = Joints::zeros();
        let fk = forward_kinematics(&c, &zero).unwrap();
        assert!((fk.to_matrix4() - dh_oracle(&c, &zero)).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q = random_q(&mut rng);
            assert!((forward_kinematics(&c, &q).unwrap().to_matrix4() - dh_oracle(&c, &q)).norm() < 1e-12);
        }
    }

    #[test]
    fn base_rotation_mirrors_flange() {
        let c = chain();
        let q0 = Joints::new(0.0, -1.0, 1.2, -0.5, 0.4, 0.3);
        let mut q1 = q0;
        q1[0] += PI;
        let p0 = forward_kinematics(&c, &q0).unwrap().translation;
        let p1 = forward_kinematics(&c, &q1).unwrap().translation;
        assert!((p1.x + p0.x).abs() < 1e-12 && (p1.y + p0.y).abs() < 1e-12 && (p1.z - p0.z).abs() < 1e-12);
    }

    #[test]
    fn out_of_limit_joint() {
        let c = chain();
        let q = Joints::new(0.0, 7.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(forward_kinematics(&c, &q), Err(RobotError::JointLimit { joint: 1, .. })));
        assert!(matches!(jacobian(&c, &q), Err(RobotError::JointLimit { .. })));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = chain();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let delta = 1e-7;
        for _ in 0..50 {
            let q = random_q(&mut rng);
            let j = jacobian(&c, &q).unwrap();
            let base = forward_kinematics(&c, &q).unwrap();
            for i in 0..6 {
                let mut qd = q;
                qd[i] += delta;
                let moved = forward_kinematics(&c, &qd).unwrap();
                let fd = pose_error(&base, &moved) / delta;
                let col = j.column(i);
                let scale = col.norm().max(1.0);
                assert!((fd - col).norm() / scale < 1e-6, "column {i}: {}", (fd - col).norm());
            }
        }
    }

    #[test]
    fn last_joint_column_has_no_linear_part() {
        let c = chain();
        let j = jacobian(&c, &Joints::new(0.2, -1.1, 1.3, -0.4, 0.9, 0.1)).unwrap();
        assert!(j.fixed_view::<3, 1>(0, 5).norm() < 1e-15);
    }

    #[test]
    fn stretched_pose_is_singular() {
        let c = chain();
        let j = jacobian(&c, &Joints::new(0.0, 0.0, 0.0, 0.0, 0.5, 0.0)).unwrap();
        let k = condition_number(&j);
        assert!(k > SINGULAR_CONDITION, "condition {k}");
        let j = jacobian(&c, &Joints::new(0.3, -1.2, 1.4, -1.0, -1.2, 0.2)).unwrap();
        assert!(condition_number(&j) < SINGULAR_CONDITION);
    }

    #[test]
    fn ik_round_trip_from_perturbed_seed() {
        let c = chain();
        let q0 = Joints::new(0.3, -1.2, 1.4, -1.0, -1.2, 0.2);
        let target = forward_kinematics(&c, &q0).unwrap();
        let seed = q0.add_scalar(0.05);
        let q = inverse_kinematics(&c, &target, &seed).unwrap();
        let (dr, dt) = forward_kinematics(&c, &q).unwrap().distance(&target);
        assert!(dt < 1e-6 && dr < 1e-6);
    }

    #[test]
    fn ik_unreachable() {
        let c = chain();
        let target = Transform3D::from_translation(Vec3::new(10.0, 0.0, 0.0));
        assert!(matches!(inverse_kinematics(&c, &target, &Joints::zeros()), Err(RobotError::Unreachable { .. })));
    }

    #[test]
    fn velocity_step_cases() {
        let c = chain();
        let s0 = JointState::at_rest(Joints::new(0.1, -1.0, 1.0, 0.0, 0.5, 0.0));
        let s1 = velocity_step(&c, &s0, &Joints::zeros(), CONTROL_PERIOD, 1.0);
        assert_eq!(s1.q, s0.q);
        assert!((s1.t - CONTROL_PERIOD).abs() < 1e-15);

        let mut cmd = Joints::zeros();
        cmd[2] = 0.1;
        let mut s = s0;
        for _ in 0..125 {
            s = velocity_step(&c, &s, &cmd, CONTROL_PERIOD, 1.0);
        }
        assert!((s.q[2] - s0.q[2] - 0.1).abs() < 1e-12);

        let cmd = c.max_speeds() * 2.0;
        let s = velocity_step(&c, &s0, &cmd, CONTROL_PERIOD, 1.0);
        assert!((s.qdot - c.max_speeds()).norm() < 1e-15);
        let s = velocity_step(&c, &s0, &cmd, CONTROL_PERIOD, 0.02);
        assert!((s.qdot - c.max_speeds() * 0.02).norm() < 1e-15);
    }

    #[test]
    fn integration_independent_of_subdivision() {
        let c = chain();
        let s0 = JointState::at_rest(Joints::new(0.1, -1.0, 1.0, 0.0, 0.5, 0.0));
        let cmd = Joints::new(0.05, -0.1, 0.2, 0.3, -0.05, 0.15);
        let mut coarse = s0;
        for _ in 0..10 {
            coarse = velocity_step(&c, &coarse, &cmd, 0.1, 1.0);
        }
        let mut fine = s0;
        for _ in 0..125 {
            fine = velocity_step(&c, &fine, &cmd, CONTROL_PERIOD, 1.0);
        }
        assert!((coarse.q - fine.q).norm() < 1e-12);
    }
}
