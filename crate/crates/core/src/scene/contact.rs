//! Rigid peg-in-hole contact model used to categorize insertion attempts.
//!
//! The plug tip frame has +z along the insertion direction; a mated plug has
//! its z anti-parallel to the port's outward z and its slot axis along the
//! port's slot axis.

use crate::geometry::{Transform3D, Vec3};
use serde::{Deserialize, Serialize};

use super::{PortModel, SceneError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionTolerances {
    /// Axis misalignment (rad) still counted as a clean insertion.
    pub axis_align: f64,
    /// Upper bound (rad) of the misalignment band where contact is still made.
    pub partial_axis_max: f64,
    /// Rotation error about the insertion axis (rad) the guidance slot absorbs.
    pub slot_rot: f64,
    /// Lateral offset at the port plane (m).
    pub lateral: f64,
    /// Shortfall from full depth (m) still counted as seated.
    pub seat_depth: f64,
}

impl Default for InsertionTolerances {
    fn default() -> Self {
        Self {
            axis_align: 1f64.to_radians(),
            partial_axis_max: 5f64.to_radians(),
            slot_rot: 8f64.to_radians(),
            lateral: 0.002,
            seat_depth: 0.003,
        }
    }
}

pub const DEFAULT_STIFFNESS: f64 = 5000.0;
pub const DEFAULT_FORCE_THRESHOLD: f64 = 30.0;
/// Axial resistance of a clean insertion once the contacts engage, N.
pub const DEFAULT_SEATING_FORCE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactModel {
    pub tolerances: InsertionTolerances,
    pub stiffness: f64,
    pub seating_force: f64,
    pub insertion_depth: f64,
    /// Slot axis of the port in the port frame.
    pub port_slot: Vec3,
    /// Slot axis of the plug in the tip frame.
    pub plug_slot: Vec3,
}

impl ContactModel {
    pub fn new(port: &PortModel, plug: &PortModel, tolerances: InsertionTolerances) -> Self {
        Self {
            tolerances,
            stiffness: DEFAULT_STIFFNESS,
            seating_force: DEFAULT_SEATING_FORCE,
            insertion_depth: port.insertion_depth,
            port_slot: port.slot_direction,
            plug_slot: plug.slot_direction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactGeometry {
    /// Penetration of the tip past the port face along the port's -z, m.
    pub depth: f64,
    /// Angle between the plug axis and the port's inward axis, rad.
    pub axis_angle: f64,
    /// Rotation error about the port axis relative to the slot, rad.
    pub slot_angle: f64,
    /// Offset from the port axis, m.
    pub lateral: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InsertionCategory {
    FullInsertion,
    PartialMisalignment,
    HaltedMissedRotation,
}

impl InsertionCategory {
    /// Wording used in result tables.
    pub fn table_label(self) -> &'static str {
        match self {
            InsertionCategory::FullInsertion => "Success",
            InsertionCategory::PartialMisalignment => "Success: Misalignment",
            InsertionCategory::HaltedMissedRotation => "Failed: Missed rotation",
        }
    }

    pub fn is_success(self) -> bool {
        !matches!(self, InsertionCategory::HaltedMissedRotation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionOutcome {
    pub category: InsertionCategory,
    pub residual_angle: f64,
    pub max_force: f64,
    pub halted: bool,
    /// Index into the trajectory of the sample that tripped the threshold.
    pub halt_index: Option<usize>,
    pub final_depth: f64,
}

pub fn contact_geometry(model: &ContactModel, tip_pose: &Transform3D, port_pose: &Transform3D) -> ContactGeometry {
    let rel = port_pose.inverse().compose(tip_pose);
    let plug_axis = rel.axis(2);
    let axis_angle = (-plug_axis.z).clamp(-1.0, 1.0).acos();
    let slot = rel.apply_vector(&model.plug_slot);
    let (sx, sy) = (slot.x, slot.y);
    let slot_angle = if sx.hypot(sy) < 1e-9 {
        std::f64::consts::PI
    } else {
        let (px, py) = (model.port_slot.x, model.port_slot.y);
        (px * sy - py * sx).atan2(px * sx + py * sy).abs()
    };
    // Where the plug axis pierces the port plane.
    let p = rel.translation;
    let crossing = if plug_axis.z.abs() > 1e-9 { p - plug_axis * (p.z / plug_axis.z) } else { p };
    ContactGeometry {
        depth: -p.z,
        axis_angle,
        slot_angle,
        lateral: crossing.x.hypot(crossing.y),
    }
}

/// Which outcome the pose geometry leads to, ignoring forces.
pub fn categorize(tol: &InsertionTolerances, g: &ContactGeometry) -> InsertionCategory {
    let keyed = g.slot_angle <= tol.slot_rot && g.lateral <= tol.lateral;
    if keyed && g.axis_angle <= tol.axis_align {
        InsertionCategory::FullInsertion
    } else if keyed && g.axis_angle <= tol.partial_axis_max {
        InsertionCategory::PartialMisalignment
    } else {
        InsertionCategory::HaltedMissedRotation
    }
}

/// Reaction force on the plug (world frame, N) at a tip pose.
pub fn contact_force(model: &ContactModel, tip_pose: &Transform3D, port_pose: &Transform3D) -> Vec3 {
    let g = contact_geometry(model, tip_pose, port_pose);
    if g.depth <= 0.0 {
        return Vec3::zeros();
    }
    let outward = port_pose.axis(2);
    match categorize(&model.tolerances, &g) {
        InsertionCategory::FullInsertion => outward * model.seating_force * (g.depth / 0.002).min(1.0),
        InsertionCategory::PartialMisalignment => {
            // The tilted plug wedges against the socket wall.
            let interference = g.depth * (g.axis_angle - model.tolerances.axis_align).sin();
            let tilt = tip_pose.axis(2);
            let lateral_dir = (tilt - outward * tilt.dot(&outward)).try_normalize(1e-12).unwrap_or_else(Vec3::zeros);
            outward * model.seating_force * (g.depth / 0.002).min(1.0) - lateral_dir * model.stiffness * interference
        }
        // Pins hit the face: a stiff spring against further travel.
        InsertionCategory::HaltedMissedRotation => outward * model.stiffness * g.depth,
    }
}

/// Step used when an attempt ends short of full depth and the stroke is
/// continued along the plug axis.
const EXTENSION_STEP: f64 = 1e-4;

/// Plays a tip trajectory against the port, halting once the force reaches
/// `force_threshold`. A trajectory that ends before full depth is continued
/// along the plug's own axis until it seats or halts.
pub fn simulate_insertion(tip_trajectory: &[Transform3D], port_pose: &Transform3D, model: &ContactModel, force_threshold: f64) -> Result<InsertionOutcome, SceneError> {
    let last = tip_trajectory.last().ok_or(SceneError::EmptyTrajectory)?;
    if !(model.stiffness > 0.0) {
        return Err(SceneError::InvalidScene("contact stiffness must be positive".into()));
    }
    let mut max_force: f64 = 0.0;
    let halted_at = |pose: &Transform3D, max_force: f64, halt_index: Option<usize>| {
        let g = contact_geometry(model, pose, port_pose);
        InsertionOutcome {
            category: InsertionCategory::HaltedMissedRotation,
            residual_angle: g.axis_angle,
            max_force,
            halted: true,
            halt_index,
            final_depth: g.depth,
        }
    };
    for (i, pose) in tip_trajectory.iter().enumerate() {
        let f = contact_force(model, pose, port_pose).norm();
        max_force = max_force.max(f);
        if f >= force_threshold {
            return Ok(halted_at(pose, max_force, Some(i)));
        }
    }

    // Continue the stroke. A blocked plug keeps compressing the face spring
    // until the monitor trips.
    let mut pose = *last;
    let step = pose.axis(2) * EXTENSION_STEP;
    let max_steps = ((model.insertion_depth + force_threshold / model.stiffness + 0.05) / EXTENSION_STEP).ceil() as usize;
    for _ in 0..max_steps {
        let g = contact_geometry(model, &pose, port_pose);
        let blocked = categorize(&model.tolerances, &g) == InsertionCategory::HaltedMissedRotation;
        if g.depth >= model.insertion_depth && !blocked {
            break;
        }
        pose.translation += step;
        let f = contact_force(model, &pose, port_pose).norm();
        max_force = max_force.max(f);
        if f >= force_threshold {
            return Ok(halted_at(&pose, max_force, None));
        }
    }

    let g = contact_geometry(model, &pose, port_pose);
    let category = categorize(&model.tolerances, &g);
    if category == InsertionCategory::HaltedMissedRotation {
        // The plug axis points away from the port and never touches it.
        return Err(SceneError::NoContact);
    }
    Ok(InsertionOutcome {
        category,
        residual_angle: g.axis_angle,
        max_force,
        halted: false,
        halt_index: None,
        final_depth: g.depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;
    use crate::geometry::Rotation3;
    use crate::scene::PortKind;
    use std::f64::consts::PI;

    fn setup() -> (ContactModel, Transform3D) {
        let port = assets::port_model(PortKind::Type2).unwrap();
        let plug = assets::plug_model().unwrap();
        let model = ContactModel::new(&port, &plug, InsertionTolerances::default());
        let port_pose = Transform3D::new(Rotation3::rot_z(0.3).mul(&Rotation3::rot_x(0.2)), Vec3::new(0.7, 0.1, 0.3));
        (model, port_pose)
    }

    /// Straight stroke from 5 mm out to full depth with the plug offset by
    /// `plug_offset` (expressed in the mated tip frame).
    fn stroke(port_pose: &Transform3D, plug_offset: Rotation3, depth: f64) -> Vec<Transform3D> {
        let mated = port_pose.compose(&Transform3D::from_rotation(Rotation3::rot_y(PI))).rotation.mul(&plug_offset);
        let axis = port_pose.axis(2);
        (0..=60)
            .map(|i| {
                let s = -0.005 + (depth + 0.005) * i as f64 / 60.0;
                Transform3D::new(mated, port_pose.translation - axis * s)
            })
            .collect()
    }

    #[test]
    fn aligned_stroke_inserts_fully() {
        let (model, port) = setup();
        let out = simulate_insertion(&stroke(&port, Rotation3::identity(), model.insertion_depth), &port, &model, DEFAULT_FORCE_THRESHOLD).unwrap();
        assert_eq!(out.category, InsertionCategory::FullInsertion);
        assert!(!out.halted);
        assert!(out.residual_angle.abs() < 1e-9);
    }

    #[test]
    fn tilted_stroke_is_partial() {
        let (model, port) = setup();
        let traj = stroke(&port, Rotation3::rot_x(3f64.to_radians()), model.insertion_depth);
        let out = simulate_insertion(&traj, &port, &model, DEFAULT_FORCE_THRESHOLD).unwrap();
        assert_eq!(out.category, InsertionCategory::PartialMisalignment);
        assert!(out.residual_angle > model.tolerances.axis_align && out.residual_angle <= model.tolerances.partial_axis_max);
        assert!((out.residual_angle - 3f64.to_radians()).abs() < 1e-9);
        assert!(out.max_force < DEFAULT_FORCE_THRESHOLD && out.max_force > DEFAULT_SEATING_FORCE);
    }

    #[test]
    fn slot_rotation_halts() {
        let (model, port) = setup();
        let traj = stroke(&port, Rotation3::rot_z(20f64.to_radians()), model.insertion_depth);
        let out = simulate_insertion(&traj, &port, &model, DEFAULT_FORCE_THRESHOLD).unwrap();
        assert_eq!(out.category, InsertionCategory::HaltedMissedRotation);
        assert!(out.halted);
        assert!(out.max_force >= DEFAULT_FORCE_THRESHOLD);
        assert!(out.final_depth < model.insertion_depth);
    }

    #[test]
    fn short_stroke_is_continued() {
        let (model, port) = setup();
        let traj = stroke(&port, Rotation3::rot_z(20f64.to_radians()), 0.0);
        let out = simulate_insertion(&traj, &port, &model, DEFAULT_FORCE_THRESHOLD).unwrap();
        assert!(out.halted && out.halt_index.is_none());
        let traj = stroke(&port, Rotation3::identity(), 0.0);
        let out = simulate_insertion(&traj, &port, &model, DEFAULT_FORCE_THRESHOLD).unwrap();
        assert_eq!(out.category, InsertionCategory::FullInsertion);
        assert!(out.final_depth >= model.insertion_depth - 1e-9);
    }

    #[test]
    fn empty_trajectory() {
        let (model, port) = setup();
        assert!(matches!(simulate_insertion(&[], &port, &model, 30.0), Err(SceneError::EmptyTrajectory)));
    }

    #[test]
    fn never_full_when_a_tolerance_is_violated() {
        // Brute-force grid over the three error sources.
        let (model, port) = setup();
        let tol = model.tolerances;
        let mated = port.compose(&Transform3D::from_rotation(Rotation3::rot_y(PI)));
        for tilt_deg in [0.0, 0.5, 0.99, 1.01, 3.0, 4.99, 5.01, 10.0] {
            for rot_deg in [0.0, 4.0, 7.99, 8.01, 20.0] {
                for lat_mm in [0.0, 1.0, 1.99, 2.01, 4.0] {
                    let offset = Rotation3::rot_z(f64::to_radians(rot_deg)).mul(&Rotation3::rot_x(f64::to_radians(tilt_deg)));
                    let tip = Transform3D::new(mated.rotation.mul(&offset), port.apply(&Vec3::new(lat_mm * 1e-3, 0.0, 0.005)));
                    let out = simulate_insertion(&[tip], &port, &model, DEFAULT_FORCE_THRESHOLD).unwrap();
                    let g = contact_geometry(&model, &tip, &port);
                    let violated = g.axis_angle > tol.axis_align || g.slot_angle > tol.slot_rot || g.lateral > tol.lateral;
                    if violated {
                        assert_ne!(out.category, InsertionCategory::FullInsertion, "tilt {tilt_deg} rot {rot_deg} lat {lat_mm}");
                    }
                    if out.halted {
                        assert!(out.max_force >= DEFAULT_FORCE_THRESHOLD);
                    }
                    if out.category == InsertionCategory::HaltedMissedRotation {
                        assert!(out.halted);
                    }
                }
            }
        }
    }
}
