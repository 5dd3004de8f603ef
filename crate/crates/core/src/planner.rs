//! Staged plug-in planning, force-monitored execution, unplugging by
//! waypoint replay and a joint-space RRT-connect for obstructed transits.

use crate::calibration::CalibrationResult;
use crate::geometry::{Rotation3, Transform3D, Vec3};
use crate::robot::{forward_kinematics, inverse_kinematics_with, velocity_step, DhChain, IkOptions, JointState, Joints, RobotError, CONTROL_PERIOD};
use crate::scene::{categorize, contact_force, contact_geometry, ContactModel, InsertionCategory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("{segment:?} target is unreachable: {source}")]
    Unreachable { segment: SegmentLabel, source: RobotError },
    #[error("execution log has no reached waypoints")]
    EmptyLog,
    #[error("start configuration is in collision")]
    StartInCollision,
    #[error("goal configuration is in collision")]
    GoalInCollision,
    #[error("no path found within {0} samples")]
    Timeout(usize),
    #[error("invalid plan parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentLabel {
    Approach,
    Align,
    Insert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub label: SegmentLabel,
    pub target_tip_pose: Transform3D,
    pub target_flange_pose: Transform3D,
    pub speed_fraction: f64,
    /// IK solution found at planning time.
    pub q_target: Joints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlugInPlan {
    pub segments: Vec<Segment>,
    pub standby_pose: Transform3D,
    /// Calibrated flange-to-tip transform used to convert tip targets.
    #[serde(rename = "T_flange_tip")]
    pub flange_from_tip: Transform3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    /// Approach distance from the port along its outward axis, m.
    pub approach_offset: f64,
    /// Align distance short of contact, m.
    pub standoff: f64,
    pub insertion_depth: f64,
    /// Speed fractions for Approach, Align and Insert.
    pub speeds: [f64; 3],
    /// Tilt of the approach orientation away from the aligned one, rad (≤ 30°).
    pub approach_tilt: f64,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self { approach_offset: 0.1, standoff: 0.005, insertion_depth: 0.025, speeds: [1.0, 0.1, 0.02], approach_tilt: 0.0 }
    }
}

/// Tip orientation mated with a port: plug z against the port's outward z.
pub fn mated_rotation(port_pose: &Transform3D) -> Rotation3 {
    port_pose.rotation.mul(&Rotation3::rot_y(PI))
}

/// IK settings for planning and tracking.
pub fn tracking_ik() -> IkOptions {
    IkOptions { position_tolerance: 1e-10, rotation_tolerance: 1e-10, max_iterations: 200, damping: 1e-4 }
}

/// Builds the Approach → Align → Insert segments for a port pose in the
/// robot base frame. IK for each target is seeded from the previous one,
/// starting at `q_seed`.
pub fn plan_plug_in(chain: &DhChain, port_pose_base: &Transform3D, calib: &CalibrationResult, standby_pose: &Transform3D, q_seed: &Joints, params: &PlanParams) -> Result<PlugInPlan, PlanError> {
    if !(params.approach_tilt.abs() <= 30f64.to_radians()) {
        return Err(PlanError::InvalidParameters("approach tilt must stay within 30°".into()));
    }
    if params.speeds.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
        return Err(PlanError::InvalidParameters("speed fractions must lie in (0, 1]".into()));
    }
    let z = port_pose_base.axis(2);
    let origin = port_pose_base.translation;
    let aligned = mated_rotation(port_pose_base);
    let approach_rot = aligned.mul(&Rotation3::rot_x(params.approach_tilt));
    let targets = [
        (SegmentLabel::Approach, Transform3D::new(approach_rot, origin + z * params.approach_offset), params.speeds[0]),
        (SegmentLabel::Align, Transform3D::new(aligned, origin + z * params.standoff), params.speeds[1]),
        (SegmentLabel::Insert, Transform3D::new(aligned, origin - z * params.insertion_depth), params.speeds[2]),
    ];
    let tip_to_flange = calib.flange_from_tip.inverse();
    let opts = tracking_ik();
    let mut seed = *q_seed;
    let mut segments = Vec::with_capacity(3);
    for (label, tip, speed) in targets {
        let flange = tip.compose(&tip_to_flange);
        let q = inverse_kinematics_with(chain, &flange, &seed, &opts).map_err(|source| PlanError::Unreachable { segment: label, source })?;
        seed = q;
        segments.push(Segment { label, target_tip_pose: tip, target_flange_pose: flange, speed_fraction: speed, q_target: q });
    }
    Ok(PlugInPlan { segments, standby_pose: *standby_pose, flange_from_tip: calib.flange_from_tip })
}

/// Ground truth the executor is played against.
#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub port_pose: Transform3D,
    /// True flange-to-tip transform of the mounted plug.
    pub flange_from_tip: Transform3D,
    pub contact: ContactModel,
    pub force_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub state: JointState,
    /// Tip pose as the controller believes it (forward kinematics with the
    /// calibrated tool transform).
    pub tip_pose: Transform3D,
    /// Simulated true tip pose.
    pub true_tip_pose: Transform3D,
    /// Contact force on the plug in the base frame, N.
    pub force: Vec3,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HaltReason {
    ForceLimit { force: f64 },
    IkFailureDuringTracking { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halt {
    pub t: f64,
    pub reason: HaltReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub samples: Vec<Sample>,
    pub waypoints_reached: Vec<Transform3D>,
    pub halt: Option<Halt>,
    pub standby_pose: Transform3D,
}

impl ExecutionLog {
    pub fn final_state(&self) -> Option<&JointState> {
        self.samples.last().map(|s| &s.state)
    }

    /// Largest joint speed as a fraction of each joint's limit, per segment.
    pub fn max_speed_fraction(&self, chain: &DhChain, segment: usize) -> f64 {
        let vmax = chain.max_speeds();
        self.samples
            .iter()
            .filter(|s| s.segment == segment)
            .flat_map(|s| (0..6).map(move |i| s.state.qdot[i].abs() / vmax[i]))
            .fold(0.0, f64::max)
    }
}

struct Tracker<'a> {
    chain: &'a DhChain,
    tip_from_flange: Transform3D,
    flange_from_tip: Transform3D,
    world: Option<&'a SimWorld>,
    monitor_force: bool,
    opts: IkOptions,
}

enum LegEnd {
    Reached,
    Halted(Halt),
}

impl Tracker<'_> {
    fn believed_tip(&self, q: &Joints) -> Transform3D {
        forward_kinematics(self.chain, q).expect("tracked configuration within limits").compose(&self.flange_from_tip)
    }

    /// Follows the straight Cartesian line from the current believed tip
    /// pose to `target`, one control period per sample.
    fn leg(&self, state: &mut JointState, target: &Transform3D, speed: f64, segment: usize, samples: &mut Vec<Sample>) -> LegEnd {
        let start = self.believed_tip(&state.q);
        let vmax = self.chain.max_speeds();
        let mut s = 0.0;
        let mut stalled = 0;
        while s < 1.0 {
            let mut ds = 1.0 - s;
            let mut accepted = None;
            for _ in 0..40 {
                let tip = start.interpolate(target, s + ds);
                let flange = tip.compose(&self.tip_from_flange);
                match inverse_kinematics_with(self.chain, &flange, &state.q, &self.opts) {
                    Ok(q) => {
                        let ratio = (0..6).map(|i| (q[i] - state.q[i]).abs() / (speed * vmax[i] * CONTROL_PERIOD)).fold(0.0, f64::max);
                        if ratio <= 1.0 {
                            accepted = Some(q);
                            break;
                        }
                        ds *= 0.98 / ratio;
                    }
                    Err(_) => ds *= 0.5,
                }
                if ds < 1e-12 {
                    break;
                }
            }
            let Some(q_next) = accepted else {
                stalled += 1;
                if stalled > 3 {
                    let halt = Halt { t: state.t, reason: HaltReason::IkFailureDuringTracking { message: format!("no IK solution along the segment at s = {s:.6}") } };
                    return LegEnd::Halted(halt);
                }
                continue;
            };
            stalled = 0;
            let qdot = (q_next - state.q) / CONTROL_PERIOD;
            *state = velocity_step(self.chain, state, &qdot, CONTROL_PERIOD, speed);
            s += ds;
            if s >= 1.0 - 1e-12 {
                // Land exactly on the IK solution of the endpoint.
                state.q = q_next;
                s = 1.0;
            }
            let fk = forward_kinematics(self.chain, &state.q).expect("tracked configuration within limits");
            let tip_pose = fk.compose(&self.flange_from_tip);
            let (true_tip_pose, force) = match self.world {
                Some(w) => {
                    let true_tip = fk.compose(&w.flange_from_tip);
                    (true_tip, contact_force(&w.contact, &true_tip, &w.port_pose))
                }
                None => (tip_pose, Vec3::zeros()),
            };
            samples.push(Sample { t: state.t, state: *state, tip_pose, true_tip_pose, force, segment });
            if let Some(w) = self.world {
                if self.monitor_force && force.norm() >= w.force_threshold {
                    return LegEnd::Halted(Halt { t: state.t, reason: HaltReason::ForceLimit { force: force.norm() } });
                }
            }
        }
        LegEnd::Reached
    }
}

/// Runs the plan from `start`, halting within one control step once the
/// contact force reaches the world's threshold.
pub fn execute(plan: &PlugInPlan, chain: &DhChain, start: &JointState, world: &SimWorld) -> ExecutionLog {
    let tracker = Tracker {
        chain,
        tip_from_flange: plan.flange_from_tip.inverse(),
        flange_from_tip: plan.flange_from_tip,
        world: Some(world),
        monitor_force: true,
        opts: tracking_ik(),
    };
    let mut state = *start;
    let mut log = ExecutionLog { samples: Vec::new(), waypoints_reached: Vec::new(), halt: None, standby_pose: plan.standby_pose };
    for (k, seg) in plan.segments.iter().enumerate() {
        match tracker.leg(&mut state, &seg.target_tip_pose, seg.speed_fraction, k, &mut log.samples) {
            LegEnd::Reached => log.waypoints_reached.push(tracker.believed_tip(&state.q)),
            LegEnd::Halted(h) => {
                log.halt = Some(h);
                break;
            }
        }
    }
    log
}

/// Unplug path: the reached waypoints in reverse order, then standby.
pub fn plan_unplug(log: &ExecutionLog) -> Result<Vec<Transform3D>, PlanError> {
    if log.waypoints_reached.is_empty() {
        return Err(PlanError::EmptyLog);
    }
    let mut path: Vec<Transform3D> = log.waypoints_reached.iter().rev().copied().collect();
    path.push(log.standby_pose);
    Ok(path)
}

/// Tracks a list of tip poses in order. Forces are logged when a world is
/// given but do not stop the retreat.
pub fn replay(chain: &DhChain, start: &JointState, path: &[Transform3D], flange_from_tip: &Transform3D, speed: f64, world: Option<&SimWorld>) -> ExecutionLog {
    let tracker = Tracker {
        chain,
        tip_from_flange: flange_from_tip.inverse(),
        flange_from_tip: *flange_from_tip,
        world,
        monitor_force: false,
        opts: tracking_ik(),
    };
    let mut state = *start;
    let standby = path.last().copied().unwrap_or_else(Transform3D::identity);
    let mut log = ExecutionLog { samples: Vec::new(), waypoints_reached: Vec::new(), halt: None, standby_pose: standby };
    for (k, target) in path.iter().enumerate() {
        match tracker.leg(&mut state, target, speed, k, &mut log.samples) {
            LegEnd::Reached => log.waypoints_reached.push(tracker.believed_tip(&state.q)),
            LegEnd::Halted(h) => {
                log.halt = Some(h);
                break;
            }
        }
    }
    log
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionResult {
    pub category: InsertionCategory,
    pub residual_angle: f64,
    pub max_force: f64,
    pub halted: bool,
    pub final_depth: f64,
}

/// Categorizes an executed plug-in. `None` when the run stopped for a reason
/// other than force (tracking failure) before reaching the socket.
pub fn insertion_result(log: &ExecutionLog, world: &SimWorld) -> Option<InsertionResult> {
    let last = log.samples.last()?;
    let g = contact_geometry(&world.contact, &last.true_tip_pose, &world.port_pose);
    let max_force = log.samples.iter().map(|s| s.force.norm()).fold(0.0, f64::max);
    let category = match &log.halt {
        Some(Halt { reason: HaltReason::ForceLimit { .. }, .. }) => InsertionCategory::HaltedMissedRotation,
        Some(_) => return None,
        None => {
            if g.depth < world.contact.insertion_depth - world.contact.tolerances.seat_depth {
                return None;
            }
            match categorize(&world.contact.tolerances, &g) {
                InsertionCategory::HaltedMissedRotation => return None,
                c => c,
            }
        }
    };
    Some(InsertionResult { category, residual_angle: g.axis_angle, max_force, halted: log.halt.is_some(), final_depth: g.depth })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, PlanError> {
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(PlanError::InvalidParameters("box extents must be positive".into()));
        }
        Ok(Self { min, max })
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        let d = Vec3::from_fn(|i, _| (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]));
        d.norm()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CollisionWorld {
    pub boxes: Vec<Aabb>,
}

/// Collision spheres attached to link frames of the arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionSpheres {
    /// `(frame index, radius)`; frame 0 is the base, 6 the flange.
    pub spheres: Vec<(usize, f64)>,
}

impl Default for CollisionSpheres {
    fn default() -> Self {
        // Elbow and flange.
        Self { spheres: vec![(2, 0.05), (6, 0.05)] }
    }
}

pub fn in_collision(chain: &DhChain, q: &Joints, world: &CollisionWorld, spheres: &CollisionSpheres) -> bool {
    if world.boxes.is_empty() {
        return false;
    }
    let frames = chain.link_frames(q);
    spheres.spheres.iter().any(|&(k, r)| world.boxes.iter().any(|b| b.distance(&frames[k].translation) < r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrtParams {
    /// Collision-check resolution along edges (max-norm, rad).
    pub step: f64,
    /// Longest tree extension, rad.
    pub extend: f64,
    pub max_samples: usize,
    pub shortcut_attempts: usize,
}

impl Default for RrtParams {
    fn default() -> Self {
        Self { step: 0.02, extend: 0.3, max_samples: 50_000, shortcut_attempts: 500 }
    }
}

/// Bound on how far the origin of frame `k` moves per radian of joint motion
/// in max-norm: each joint before `k` swings it by at most its distance to `k`.
fn sweep_rate(chain: &DhChain, k: usize) -> f64 {
    let link = |i: usize| chain.joints[i].a.hypot(chain.joints[i].d);
    (0..k).map(|j| (j..k).map(link).sum::<f64>()).sum()
}

fn clear(chain: &DhChain, q: &Joints, world: &CollisionWorld, spheres: &CollisionSpheres, margin: &[f64]) -> bool {
    let frames = chain.link_frames(q);
    spheres.spheres.iter().zip(margin).all(|(&(k, r), m)| world.boxes.iter().all(|b| b.distance(&frames[k].translation) >= r + m))
}

/// Continuous check of the straight joint-space segment: endpoints exactly,
/// interior by midpoints of sub-intervals of at most `step` with spheres
/// inflated to cover every configuration in the sub-interval.
fn edge_free(chain: &DhChain, a: &Joints, b: &Joints, world: &CollisionWorld, spheres: &CollisionSpheres, step: f64) -> bool {
    if world.boxes.is_empty() {
        return true;
    }
    let n = ((b - a).amax() / step).ceil().max(1.0) as usize;
    let half = 0.5 * (b - a).amax() / n as f64;
    let margin: Vec<f64> = spheres.spheres.iter().map(|&(k, _)| half * sweep_rate(chain, k)).collect();
    clear(chain, a, world, spheres, &vec![0.0; margin.len()])
        && clear(chain, b, world, spheres, &vec![0.0; margin.len()])
        && (0..n).all(|k| clear(chain, &(a + (b - a) * ((k as f64 + 0.5) / n as f64)), world, spheres, &margin))
}

struct Tree {
    nodes: Vec<Joints>,
    parent: Vec<usize>,
}

impl Tree {
    fn new(root: Joints) -> Self {
        Self { nodes: vec![root], parent: vec![usize::MAX] }
    }

    fn nearest(&self, q: &Joints) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = (n - q).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn path_to_root(&self, mut i: usize) -> Vec<Joints> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.nodes[i]);
            i = self.parent[i];
        }
        out
    }
}

enum Extend {
    Trapped,
    Advanced(usize),
    Reached(usize),
}

struct Rrt<'a> {
    chain: &'a DhChain,
    world: &'a CollisionWorld,
    spheres: &'a CollisionSpheres,
    params: &'a RrtParams,
}

impl Rrt<'_> {
    fn extend(&self, tree: &mut Tree, target: &Joints) -> Extend {
        let near = tree.nearest(target);
        let from = tree.nodes[near];
        let delta = target - from;
        let dist = delta.norm();
        let (to, reached) = if dist <= self.params.extend { (*target, true) } else { (from + delta * (self.params.extend / dist), false) };
        if !edge_free(self.chain, &from, &to, self.world, self.spheres, self.params.step) {
            return Extend::Trapped;
        }
        tree.nodes.push(to);
        tree.parent.push(near);
        let id = tree.nodes.len() - 1;
        if reached {
            Extend::Reached(id)
        } else {
            Extend::Advanced(id)
        }
    }

    fn connect(&self, tree: &mut Tree, target: &Joints) -> Extend {
        loop {
            match self.extend(tree, target) {
                Extend::Advanced(_) => continue,
                other => return other,
            }
        }
    }
}

/// Bidirectional RRT with greedy connection and random shortcutting.
pub fn rrt_connect(chain: &DhChain, q_start: &Joints, q_goal: &Joints, world: &CollisionWorld, spheres: &CollisionSpheres, params: &RrtParams, rng_seed: u64) -> Result<Vec<Joints>, PlanError> {
    if !(params.step > 0.0 && params.extend > 0.0) {
        return Err(PlanError::InvalidParameters("step and extend must be positive".into()));
    }
    if in_collision(chain, q_start, world, spheres) {
        return Err(PlanError::StartInCollision);
    }
    if in_collision(chain, q_goal, world, spheres) {
        return Err(PlanError::GoalInCollision);
    }
    if edge_free(chain, q_start, q_goal, world, spheres, params.step) {
        return Ok(vec![*q_start, *q_goal]);
    }
    let rrt = Rrt { chain, world, spheres, params };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut a = Tree::new(*q_start);
    let mut b = Tree::new(*q_goal);
    let mut a_is_start = true;
    for _ in 0..params.max_samples {
        let q_rand = Joints::from_fn(|_, _| rng.random_range(-PI..PI));
        let new_id = match rrt.extend(&mut a, &q_rand) {
            Extend::Trapped => None,
            Extend::Advanced(id) | Extend::Reached(id) => Some(id),
        };
        if let Some(id) = new_id {
            let q_new = a.nodes[id];
            if let Extend::Reached(bid) = rrt.connect(&mut b, &q_new) {
                let mut from_a = a.path_to_root(id);
                from_a.reverse();
                let from_b = b.path_to_root(bid);
                from_a.extend(from_b.into_iter().skip(1));
                if !a_is_start {
                    from_a.reverse();
                }
                return Ok(shortcut(chain, from_a, world, spheres, params, &mut rng));
            }
        }
        std::mem::swap(&mut a, &mut b);
        a_is_start = !a_is_start;
    }
    Err(PlanError::Timeout(params.max_samples))
}

fn shortcut(chain: &DhChain, mut path: Vec<Joints>, world: &CollisionWorld, spheres: &CollisionSpheres, params: &RrtParams, rng: &mut ChaCha8Rng) -> Vec<Joints> {
    for _ in 0..params.shortcut_attempts {
        if path.len() < 3 {
            break;
        }
        let i = rng.random_range(0..path.len() - 2);
        let j = rng.random_range(i + 2..path.len());
        if edge_free(chain, &path[i], &path[j], world, spheres, params.step) {
            path.drain(i + 1..j);
        }
    }
    path
}

pub fn path_length(path: &[Joints]) -> f64 {
    path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;
    use crate::scene::{InsertionTolerances, PortKind};

    fn chain() -> DhChain {
        assets::ur10_chain().unwrap()
    }

    fn calib(x: Transform3D) -> CalibrationResult {
        CalibrationResult { base_from_cam: Transform3D::identity(), flange_from_tip: x, per_pair_residual: vec![], mean_translation_error: 0.0, iterations: 0 }
    }

    fn tool() -> Transform3D {
        Transform3D::new(Rotation3::rot_z(0.05), Vec3::new(0.005, -0.01, 0.18))
    }

    /// Port facing -y in the base frame, tilted by `angle` about the base z.
    fn port(angle: f64) -> Transform3D {
        let facing = Rotation3::rot_x(PI / 2.0);
        Transform3D::new(Rotation3::rot_z(angle).mul(&facing), Vec3::new(0.2, 0.85, 0.4))
    }

    fn start_state(chain: &DhChain, plan: &PlugInPlan) -> JointState {
        let flange = plan.standby_pose.compose(&plan.flange_from_tip.inverse());
        JointState::at_rest(inverse_kinematics_with(chain, &flange, &plan.segments[0].q_target, &tracking_ik()).unwrap())
    }

    fn standby(port: &Transform3D) -> Transform3D {
        Transform3D::new(mated_rotation(port), port.translation + port.axis(2) * 0.3 + Vec3::new(0.1, 0.0, 0.1))
    }

    fn seed() -> Joints {
        Joints::new(1.2, -1.2, 1.5, -1.9, -1.57, 0.0)
    }

    fn world(port_pose: Transform3D) -> SimWorld {
        let p = assets::port_model(PortKind::Type2).unwrap();
        let plug = assets::plug_model().unwrap();
        SimWorld { port_pose, flange_from_tip: tool(), contact: ContactModel::new(&p, &plug, InsertionTolerances::default()), force_threshold: 30.0 }
    }

    #[test]
    fn plan_geometry() {
        let c = chain();
        let p = port(0.0);
        let plan = plan_plug_in(&c, &p, &calib(tool()), &standby(&p), &seed(), &PlanParams::default()).unwrap();
        let labels: Vec<_> = plan.segments.iter().map(|s| s.label).collect();
        assert_eq!(labels, [SegmentLabel::Approach, SegmentLabel::Align, SegmentLabel::Insert]);
        assert_eq!(plan.segments.iter().map(|s| s.speed_fraction).collect::<Vec<_>>(), [1.0, 0.1, 0.02]);
        let align = &plan.segments[1].target_tip_pose;
        let insert = &plan.segments[2].target_tip_pose;
        let d = insert.translation - align.translation;
        assert!((d.norm() - 0.03).abs() < 1e-12);
        assert!((d.normalize() + p.axis(2)).norm() < 1e-12);
        // Tip z anti-parallel to the port's outward z, no lateral offset.
        assert!((align.axis(2).dot(&p.axis(2)) + 1.0).abs() < 1e-9);
        let lateral = (align.translation - p.translation).cross(&p.axis(2)).norm();
        assert!(lateral < 1e-9);
        for s in &plan.segments {
            let fk = forward_kinematics(&c, &s.q_target).unwrap();
            assert!(fk.distance(&s.target_flange_pose).1 < 1e-9);
        }
    }

    #[test]
    fn tilted_port_tilts_insert_direction() {
        let p = port(30f64.to_radians());
        let plan = plan_plug_in(&chain(), &p, &calib(tool()), &standby(&p), &seed(), &PlanParams::default()).unwrap();
        let d = (plan.segments[2].target_tip_pose.translation - plan.segments[1].target_tip_pose.translation).normalize();
        assert!((d.dot(&p.axis(2)) + 1.0).abs() < 1e-9);
        assert!((plan.segments[2].target_tip_pose.axis(2).dot(&port(0.0).axis(2)) + 30f64.to_radians().cos()).abs() < 1e-9);
    }

    #[test]
    fn far_port_unreachable() {
        let p = Transform3D::new(Rotation3::rot_x(PI / 2.0), Vec3::new(-3.0, 0.0, 0.4));
        let r = plan_plug_in(&chain(), &p, &calib(tool()), &standby(&p), &seed(), &PlanParams::default());
        assert!(matches!(r, Err(PlanError::Unreachable { segment: SegmentLabel::Approach, .. })));
    }

    #[test]
    fn ideal_execution_seats_plug() {
        let c = chain();
        let p = port(10f64.to_radians());
        let plan = plan_plug_in(&c, &p, &calib(tool()), &standby(&p), &seed(), &PlanParams::default()).unwrap();
        let w = world(p);
        let log = execute(&plan, &c, &start_state(&c, &plan), &w);
        assert!(log.halt.is_none());
        assert_eq!(log.waypoints_reached.len(), 3);
        let res = insertion_result(&log, &w).unwrap();
        assert_eq!(res.category, InsertionCategory::FullInsertion);
        assert!((res.final_depth - 0.025).abs() < 1e-6);
        // Strictly increasing timestamps and speed staging.
        assert!(log.samples.windows(2).all(|s| s[1].t > s[0].t));
        assert!(log.max_speed_fraction(&c, 1) <= 0.1 + 1e-9);
        assert!(log.max_speed_fraction(&c, 2) <= 0.02 + 1e-9);
        assert!(log.max_speed_fraction(&c, 0) <= 1.0 + 1e-9);
    }

    #[test]
    fn yaw_error_halts_during_insert() {
        let c = chain();
        let truth = port(0.0);
        // Detected port rotated 15° about its own axis.
        let detected = truth.compose(&Transform3D::from_rotation(Rotation3::rot_z(15f64.to_radians())));
        let plan = plan_plug_in(&c, &detected, &calib(tool()), &standby(&detected), &seed(), &PlanParams::default()).unwrap();
        let w = world(truth);
        let log = execute(&plan, &c, &start_state(&c, &plan), &w);
        let halt = log.halt.as_ref().expect("halt");
        assert!(matches!(halt.reason, HaltReason::ForceLimit { .. }));
        let last = log.samples.last().unwrap();
        assert_eq!(last.segment, 2);
        assert!(last.force.norm() >= 30.0);
        // Halt within one step: the sample before is below the threshold and
        // no sample exceeds the threshold by more than one step of force.
        let prev = &log.samples[log.samples.len() - 2];
        assert!(prev.force.norm() < 30.0);
        let step_depth = (last.true_tip_pose.translation - prev.true_tip_pose.translation).norm();
        assert!(last.force.norm() <= 30.0 + w.contact.stiffness * step_depth + 1e-9);
        let res = insertion_result(&log, &w).unwrap();
        assert_eq!(res.category, InsertionCategory::HaltedMissedRotation);
        assert!(res.final_depth < 0.025);
        assert_eq!(log.waypoints_reached.len(), 2);
    }

    #[test]
    fn axis_error_gives_partial_insertion() {
        let c = chain();
        let truth = port(0.0);
        let detected = truth.compose(&Transform3D::from_rotation(Rotation3::rot_x(3f64.to_radians())));
        let plan = plan_plug_in(&c, &detected, &calib(tool()), &standby(&detected), &seed(), &PlanParams::default()).unwrap();
        let w = world(truth);
        let log = execute(&plan, &c, &start_state(&c, &plan), &w);
        assert!(log.halt.is_none());
        let res = insertion_result(&log, &w).unwrap();
        assert_eq!(res.category, InsertionCategory::PartialMisalignment);
        assert!(res.residual_angle > 1f64.to_radians() && res.residual_angle < 5f64.to_radians());
        assert!(res.max_force > w.contact.seating_force);
    }

    #[test]
    fn unplug_reverses_waypoints() {
        let a = Transform3D::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let b = Transform3D::from_translation(Vec3::new(2.0, 0.0, 0.0));
        let c = Transform3D::from_translation(Vec3::new(3.0, 0.0, 0.0));
        let s = Transform3D::from_translation(Vec3::new(9.0, 0.0, 0.0));
        let mut log = ExecutionLog { samples: vec![], waypoints_reached: vec![a, b, c], halt: None, standby_pose: s };
        assert_eq!(plan_unplug(&log).unwrap(), vec![c, b, a, s]);
        log.waypoints_reached.truncate(1);
        assert_eq!(plan_unplug(&log).unwrap(), vec![a, s]);
        log.waypoints_reached.clear();
        assert_eq!(plan_unplug(&log), Err(PlanError::EmptyLog));
    }

    #[test]
    fn replay_returns_to_approach() {
        let c = chain();
        let p = port(30f64.to_radians());
        let plan = plan_plug_in(&c, &p, &calib(tool()), &standby(&p), &seed(), &PlanParams::default()).unwrap();
        let w = world(p);
        let log = execute(&plan, &c, &start_state(&c, &plan), &w);
        let path = plan_unplug(&log).unwrap();
        let back = replay(&c, log.final_state().unwrap(), &path, &plan.flange_from_tip, 0.1, Some(&w));
        assert!(back.halt.is_none());
        assert_eq!(back.waypoints_reached.len(), 4);
        assert!(back.waypoints_reached[2].distance(&plan.segments[0].target_tip_pose).1 < 1e-6);
        assert!(back.waypoints_reached[3].distance(&plan.standby_pose).1 < 1e-6);
    }

    fn blocking_setup() -> (Joints, Joints, CollisionWorld) {
        let c = chain();
        let qa = Joints::new(0.8, -1.3, 1.6, -1.8, -1.57, 0.0);
        let qb = Joints::new(-0.8, -1.3, 1.6, -1.8, -1.57, 0.0);
        let mid = forward_kinematics(&c, &((qa + qb) * 0.5)).unwrap().translation;
        let b = Aabb::new(mid - Vec3::new(0.08, 0.08, 0.08), mid + Vec3::new(0.08, 0.08, 0.08)).unwrap();
        (qa, qb, CollisionWorld { boxes: vec![b] })
    }

    /// Point samples ten times denser than the planner's resolution.
    fn dense_free(path: &[Joints], world: &CollisionWorld, step: f64) -> bool {
        let c = chain();
        path.windows(2).all(|w| {
            let n = ((w[1] - w[0]).amax() / (step / 10.0)).ceil().max(1.0) as usize;
            (0..=n).all(|k| !in_collision(&c, &(w[0] + (w[1] - w[0]) * (k as f64 / n as f64)), world, &CollisionSpheres::default()))
        })
    }

    #[test]
    fn rrt_free_space_is_straight() {
        let (qa, qb, _) = blocking_setup();
        let path = rrt_connect(&chain(), &qa, &qb, &CollisionWorld::default(), &CollisionSpheres::default(), &RrtParams::default(), 1).unwrap();
        assert!(path_length(&path) <= 1.1 * (qb - qa).norm());
        assert_eq!(path.first(), Some(&qa));
        assert_eq!(path.last(), Some(&qb));
    }

    #[test]
    fn rrt_around_box_deterministic() {
        let (qa, qb, world) = blocking_setup();
        let c = chain();
        let params = RrtParams::default();
        assert!(!edge_free(&c, &qa, &qb, &world, &CollisionSpheres::default(), params.step));
        for seed in 0..5 {
            let path = rrt_connect(&c, &qa, &qb, &world, &CollisionSpheres::default(), &params, seed).unwrap();
            assert_eq!(path.first(), Some(&qa));
            assert_eq!(path.last(), Some(&qb));
            assert!(dense_free(&path, &world, params.step));
            assert_eq!(path, rrt_connect(&c, &qa, &qb, &world, &CollisionSpheres::default(), &params, seed).unwrap());
        }
    }

    proptest::proptest! {
        #[test]
        fn accepted_edges_are_free_everywhere(a in proptest::array::uniform6(-0.4f64..0.4), b in proptest::array::uniform6(-0.4f64..0.4)) {
            let (qa, qb, world) = blocking_setup();
            let mid = (qa + qb) * 0.5;
            let (p, q) = (mid + Joints::from_row_slice(&a), mid + Joints::from_row_slice(&b));
            if edge_free(&chain(), &p, &q, &world, &CollisionSpheres::default(), 0.02) {
                proptest::prop_assert!(dense_free(&[p, q], &world, 0.002));
            }
        }
    }

    #[test]
    fn rrt_goal_in_box() {
        let (qa, qb, _) = blocking_setup();
        let c = chain();
        let flange = forward_kinematics(&c, &qb).unwrap().translation;
        let world = CollisionWorld { boxes: vec![Aabb::new(flange - Vec3::repeat(0.02), flange + Vec3::repeat(0.02)).unwrap()] };
        let r = rrt_connect(&c, &qa, &qb, &world, &CollisionSpheres::default(), &RrtParams::default(), 0);
        assert_eq!(r, Err(PlanError::GoalInCollision));
        assert!(Aabb::new(Vec3::zeros(), Vec3::new(1.0, 0.0, 1.0)).is_err());
    }
}
