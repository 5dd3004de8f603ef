//! End-to-end simulation: the world layout, noise presets, port and plug
//! detection in rendered stereo pairs, the calibration driver and the
//! plug-in / unplug experiment runs.

use crate::assets::{self, AssetError};
use crate::calibration::{calibrate, reject_outliers, CalibrationError, CalibrationResult, PosePair, DEFAULT_MIN_SCORE};
use crate::geometry::{project_pinhole, CameraIntrinsics, Rotation3, Transform3D, Vec3};
use crate::image::{GrayImage, ImageF32};
use crate::matching::{create_template, match_template, score_affine, Keypoint, Match2D, MatchError, MatchParams, Roi, ShapeTemplate, TemplateParams};
use crate::planner::{execute, insertion_result, plan_plug_in, plan_unplug, replay, tracking_ik, PlanError, PlanParams, SimWorld};
use crate::pose::{estimate_port_pose, PoseError};
use crate::robot::{forward_kinematics, inverse_kinematics_with, DhChain, JointState, Joints, RobotError};
use crate::scene::{
    rasterize_coverage, render_views, ContactModel, InsertionCategory, InsertionTolerances, PortKind, PortModel, SceneConfig, SceneError, StereoRig, BACKGROUND_LEVEL,
    DEFAULT_FORCE_THRESHOLD, FEATURE_LEVEL, SUPERSAMPLE,
};
use crate::triangulation::{triangulate_port_points, LabeledPixel, TriangulationError, TriangulationMethod};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Matching(#[from] MatchError),
    #[error(transparent)]
    Triangulation(#[from] TriangulationError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Robot(#[from] RobotError),
    #[error("detection failed: {0}")]
    Detection(String),
    #[error("unknown noise preset {0:?} (expected none, lab or lab-rendered)")]
    UnknownNoisePreset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Named measurement-noise preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub name: String,
    /// Whether detection runs on rendered images; otherwise the exact pin
    /// projections are used.
    pub render_images: bool,
    /// Additive grey-level noise wherever images are rendered.
    pub image_noise_sigma: f64,
    /// Gaussian noise added to every detected pin coordinate, px.
    pub keypoint_sigma_px: f64,
    /// Per-axis rotation jitter of the port holder, degrees.
    pub port_jitter_deg: f64,
}

impl NoiseProfile {
    pub fn none() -> Self {
        Self { name: "none".into(), render_images: false, image_noise_sigma: 0.0, keypoint_sigma_px: 0.0, port_jitter_deg: 0.0 }
    }

    /// 0.5 px Gaussian noise on every pin projection and 0.2° port-holder jitter.
    pub fn lab() -> Self {
        Self { name: "lab".into(), render_images: false, image_noise_sigma: 2.0, keypoint_sigma_px: 0.5, port_jitter_deg: 0.2 }
    }

    /// Pins located by template matching in rendered, noisy images; the
    /// detection error replaces the synthetic keypoint noise.
    pub fn lab_rendered() -> Self {
        Self { name: "lab-rendered".into(), render_images: true, image_noise_sigma: 2.0, keypoint_sigma_px: 0.0, port_jitter_deg: 0.2 }
    }

    pub const NAMES: [&'static str; 3] = ["none", "lab", "lab-rendered"];

    pub fn preset(name: &str) -> Result<Self, PipelineError> {
        match name {
            "none" => Ok(Self::none()),
            "lab" => Ok(Self::lab()),
            "lab-rendered" => Ok(Self::lab_rendered()),
            other => Err(PipelineError::UnknownNoisePreset(other.into())),
        }
    }
}

pub const IMAGE_WIDTH: u32 = 1024;
pub const IMAGE_HEIGHT: u32 = 768;
pub const FOCAL_PX: f64 = 1600.0;
pub const BASELINE: f64 = 0.2;
/// Distance from camera 1 to the port, also where the optical axes cross.
pub const WORKING_DEPTH: f64 = 0.65;

/// Stereo rig, arm, mounted plug and port placement, all in the robot base
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldLayout {
    pub rig: StereoRig,
    pub chain: DhChain,
    /// True flange-to-tip transform of the mounted plug.
    pub flange_from_tip: Transform3D,
    pub standby_pose: Transform3D,
    /// IK seed near the plug-in workspace (tip pointing at the port).
    pub q_work: Joints,
    /// IK seed for calibration presentations (plug facing the camera).
    pub q_present: Joints,
}

/// Port frame facing camera 1 at `depth`, turned by `angle` about the
/// vertical image axis. Positive angles turn the face toward camera 2.
pub fn port_in_cam1(angle: f64, depth: f64) -> Transform3D {
    Transform3D::new(Rotation3::rot_y(-angle).mul(&Rotation3::rot_x(PI)), Vec3::new(0.0, 0.0, depth))
}

/// Camera-1 pose in the base frame: looking along base +y from the side of
/// the arm, with a small generic misalignment.
fn camera_pose() -> Transform3D {
    let looking_y = Rotation3::project(Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0));
    let tweak = Rotation3::rot_z(0.012).mul(&Rotation3::rot_y(-0.018)).mul(&Rotation3::rot_x(0.021));
    Transform3D::new(looking_y.mul(&tweak), Vec3::new(0.7, -0.65, 0.3))
}

fn true_tool() -> Transform3D {
    Transform3D::new(Rotation3::rot_z(0.03).mul(&Rotation3::rot_x(-0.02)), Vec3::new(0.005, -0.01, 0.18))
}

const SEED_CANDIDATES: [[f64; 6]; 6] = [
    [-1.0, -1.2, 1.6, -1.9, -1.57, 0.0],
    [-0.6, -1.4, 1.9, -2.1, -1.57, 0.0],
    [-1.3, -1.0, 1.4, -1.9, -1.57, 0.0],
    [-0.8, -1.6, 1.8, 1.4, 1.57, 0.0],
    [-1.5, -1.1, 1.5, 1.2, 1.57, 0.0],
    [-0.9, -1.3, 2.0, -0.7, 1.57, 0.0],
];

fn find_seed(chain: &DhChain, flange: &Transform3D) -> Result<Joints, PipelineError> {
    let mut last = None;
    for s in SEED_CANDIDATES {
        match inverse_kinematics_with(chain, flange, &Joints::from_row_slice(&s), &tracking_ik()) {
            Ok(q) => return Ok(q),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("non-empty seed list").into())
}

impl WorldLayout {
    pub fn standard() -> Result<Self, PipelineError> {
        let intr = CameraIntrinsics::centered(FOCAL_PX, IMAGE_WIDTH, IMAGE_HEIGHT).map_err(SceneError::from)?;
        let theta = (BASELINE / WORKING_DEPTH).atan();
        let rig = StereoRig::new(intr, intr, BASELINE, theta, camera_pose())?;
        let chain = assets::ur10_chain()?;
        let flange_from_tip = true_tool();
        let tool_inv = flange_from_tip.inverse();

        let port = rig.world_from_cam1.compose(&port_in_cam1(0.0, WORKING_DEPTH));
        let mated = port.rotation.mul(&Rotation3::rot_y(PI));
        let approach = Transform3D::new(mated, port.translation + port.axis(2) * 0.1);
        let q_work = find_seed(&chain, &approach.compose(&tool_inv))?;
        let standby_pose = Transform3D::new(mated, port.translation + port.axis(2) * 0.3 + Vec3::new(-0.15, 0.0, 0.15));

        let present = rig.world_from_cam1.compose(&Transform3D::new(Rotation3::rot_x(PI), Vec3::new(0.0, 0.0, WORKING_DEPTH)));
        let q_present = find_seed(&chain, &present.compose(&tool_inv))?;
        Ok(Self { rig, chain, flange_from_tip, standby_pose, q_work, q_present })
    }

    /// Port pose in the base frame for a given angle and holder jitter.
    pub fn port_pose(&self, angle: f64, jitter: &Rotation3) -> Transform3D {
        let p = port_in_cam1(angle, WORKING_DEPTH);
        self.rig.world_from_cam1.compose(&Transform3D::new(p.rotation.mul(jitter), p.translation))
    }

    pub fn base_from_cam(&self) -> Transform3D {
        self.rig.world_from_cam1
    }
}

/// Scene of a single rendered frame: the port at `angle_deg` with holder
/// jitter and image noise drawn from `seed`.
pub fn frame_scene(world: &WorldLayout, model: &PortModel, angle_deg: f64, noise: &NoiseProfile, seed: u64) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let jitter = jitter_rotation(&mut rng, noise.port_jitter_deg);
    SceneConfig {
        port_pose: world.port_pose(angle_deg.to_radians(), &jitter),
        port: model.clone(),
        pixel_noise_sigma: noise.image_noise_sigma,
        illumination_scale: 1.0,
        rng_seed: rng.random(),
    }
}

/// Small random rotation with independent per-axis angles of σ = `deg`.
pub fn jitter_rotation(rng: &mut ChaCha8Rng, deg: f64) -> Rotation3 {
    if deg <= 0.0 {
        return Rotation3::identity();
    }
    let n = Normal::new(0.0, deg.to_radians()).expect("positive sigma");
    Rotation3::exp(&Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng)))
}

/// Grey image of a port model with no noise, pixel-centered like `render_views`.
pub fn render_clean(model: &PortModel, pose_in_cam: &Transform3D, intr: &CameraIntrinsics) -> GrayImage {
    let coverage = rasterize_coverage(model, pose_in_cam, intr, &Transform3D::identity(), SUPERSAMPLE);
    let mut img = GrayImage::new(intr.width as usize, intr.height as usize, 0);
    for (px, c) in img.data.iter_mut().zip(&coverage) {
        *px = (BACKGROUND_LEVEL - *c as f64 * (BACKGROUND_LEVEL - FEATURE_LEVEL)).round().clamp(0.0, 255.0) as u8;
    }
    img
}

/// Intensity below the background counted as dark-feature evidence.
const DARK_MARGIN: f32 = 8.0;
/// Centroid window radius relative to the expected pin radius.
const WINDOW_FACTOR: f64 = 1.6;

/// Template matcher for one port or plug model, with per-pin keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortDetector {
    pub template: ShapeTemplate,
    /// Expected pin radius in pixels, by keypoint.
    pub pin_radius_px: Vec<f64>,
    pub match_params: MatchParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDetection {
    pub pixels: Vec<LabeledPixel>,
    pub matched: Match2D,
    /// Template score under the affine map fitted to the refined pins.
    pub score: f64,
}

impl PortDetector {
    /// Builds the template from a noiseless frontal view of `model` at `depth`.
    pub fn new(model: &PortModel, intr: &CameraIntrinsics, depth: f64) -> Result<Self, PipelineError> {
        let pose = port_in_cam1(0.0, depth);
        let img = render_clean(model, &pose, intr).to_f32();
        let (cx, cy) = intr.to_buffer(0.0, 0.0);
        let radius = model.extent() * intr.f / depth + 3.0;
        let mut template = create_template(&img, Roi { cx, cy, radius }, TemplateParams::default())?;
        let mut pin_radius_px = Vec::with_capacity(model.pins.len());
        for pin in &model.pins {
            let (x, y) = project_pinhole(intr, &pose.apply(&pin.center)).map_err(SceneError::from)?;
            template.keypoints.push(Keypoint { label: pin.label.clone(), u: x, v: y });
            pin_radius_px.push(pin.radius * intr.f / depth);
        }
        let match_params = MatchParams {
            angle_range: (-30f64.to_radians(), 30f64.to_radians()),
            angle_step: 6f64.to_radians(),
            min_score: 0.5,
            scale_x_range: (0.6, 1.1),
            scale_y_range: (0.82, 1.1),
            scale_step: 0.1,
            ..MatchParams::default()
        };
        Ok(Self { template, pin_radius_px, match_params })
    }

    pub fn best_match(&self, image: &ImageF32) -> Result<Match2D, PipelineError> {
        match_template(image, &self.template, &self.match_params)?
            .into_iter()
            .next()
            .ok_or_else(|| PipelineError::Detection("no template match above the minimum score".into()))
    }

    /// Locates every pin: template match, dark-disk centroid refinement, an
    /// affine re-prediction from the refined pins and a second refinement.
    pub fn detect(&self, image: &GrayImage, intr: &CameraIntrinsics) -> Result<ViewDetection, PipelineError> {
        let f = image.to_f32();
        let matched = self.best_match(&f)?;
        let background = median(image);
        let predicted = self.template.place_keypoints(&matched);
        let scale = 1.0;
        let first = self.refine_all(&f, predicted.iter().map(|(_, x, y)| (*x, *y)), background, scale)?;
        let affine = fit_affine(&self.template.keypoints, &first).ok_or_else(|| PipelineError::Detection("degenerate pin layout".into()))?;
        let scale = (affine.determinant().abs()).sqrt();
        let repredicted: Vec<(f64, f64)> = self
            .template
            .keypoints
            .iter()
            .map(|k| {
                let p = affine * Vector3::new(k.u, k.v, 1.0);
                (p.x, p.y)
            })
            .collect();
        let refined = self.refine_all(&f, repredicted.into_iter(), background, scale)?;
        let fitted = fit_affine(&self.template.keypoints, &refined).ok_or_else(|| PipelineError::Detection("degenerate pin layout".into()))?;
        let rows = [[fitted[(0, 0)], fitted[(0, 1)], fitted[(0, 2)]], [fitted[(1, 0)], fitted[(1, 1)], fitted[(1, 2)]]];
        let score = score_affine(&f, &self.template, rows)?.max(matched.score);
        let pixels = self
            .template
            .keypoints
            .iter()
            .zip(refined)
            .map(|(k, (u, v))| {
                let (x, y) = intr.from_buffer(u, v);
                LabeledPixel { label: k.label.clone(), x, y }
            })
            .collect();
        Ok(ViewDetection { pixels, matched, score })
    }

    fn refine_all(&self, img: &ImageF32, starts: impl Iterator<Item = (f64, f64)>, background: f32, scale: f64) -> Result<Vec<(f64, f64)>, PipelineError> {
        starts
            .zip(&self.template.keypoints)
            .zip(&self.pin_radius_px)
            .map(|((s, k), r)| refine_disk(img, s, WINDOW_FACTOR * r * scale, background).ok_or_else(|| PipelineError::Detection(format!("pin {} not found", k.label))))
            .collect()
    }
}

fn median(img: &GrayImage) -> f32 {
    let mut hist = [0usize; 256];
    for &p in &img.data {
        hist[p as usize] += 1;
    }
    let half = img.data.len() / 2;
    let mut acc = 0;
    for (v, n) in hist.iter().enumerate() {
        acc += n;
        if acc > half {
            return v as f32;
        }
    }
    255.0
}

/// Mean-shift to the darkness-weighted centroid within a circular window.
fn refine_disk(img: &ImageF32, start: (f64, f64), window: f64, background: f32) -> Option<(f64, f64)> {
    let (mut cx, mut cy) = start;
    let (w, h) = (img.width as f64, img.height as f64);
    for _ in 0..50 {
        let x0 = (cx - window).floor().max(0.0) as usize;
        let x1 = (cx + window).ceil().min(w - 1.0) as usize;
        let y0 = (cy - window).floor().max(0.0) as usize;
        let y1 = (cy + window).ceil().min(h - 1.0) as usize;
        if x0 > x1 || y0 > y1 {
            return None;
        }
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy > window * window {
                    continue;
                }
                let wt = (background - DARK_MARGIN - img.get(x, y)).max(0.0) as f64;
                sw += wt;
                sx += wt * x as f64;
                sy += wt * y as f64;
            }
        }
        if sw <= 0.0 {
            return None;
        }
        let (nx, ny) = (sx / sw, sy / sw);
        let shift = (nx - cx).hypot(ny - cy);
        cx = nx;
        cy = ny;
        if shift < 1e-6 {
            break;
        }
    }
    Some((cx, cy))
}

/// Least-squares 2D affine map from keypoint offsets to image positions.
fn fit_affine(keypoints: &[Keypoint], targets: &[(f64, f64)]) -> Option<Matrix3<f64>> {
    let mut ata = Matrix3::zeros();
    let mut atx = Vector3::zeros();
    let mut aty = Vector3::zeros();
    for (k, (x, y)) in keypoints.iter().zip(targets) {
        let a = Vector3::new(k.u, k.v, 1.0);
        ata += a * a.transpose();
        atx += a * *x;
        aty += a * *y;
    }
    let chol = ata.cholesky()?;
    let rx = chol.solve(&atx);
    let ry = chol.solve(&aty);
    Some(Matrix3::new(rx[0], rx[1], rx[2], ry[0], ry[1], ry[2], 0.0, 0.0, 1.0))
}

/// Pin observations of one stereo frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoObservation {
    pub left: Vec<LabeledPixel>,
    pub right: Vec<LabeledPixel>,
    /// Lower of the two match scores (1 for exact projections).
    pub score: f64,
}

/// Observes a model at `pose_world` through the rig under a noise preset.
pub fn observe(
    rig: &StereoRig,
    model: &PortModel,
    pose_world: &Transform3D,
    detector: &PortDetector,
    noise: &NoiseProfile,
    rng: &mut ChaCha8Rng,
) -> Result<StereoObservation, PipelineError> {
    let render_seed: u64 = rng.random();
    let (mut left, mut right, score) = if noise.render_images {
        let scene = SceneConfig { port_pose: *pose_world, port: model.clone(), pixel_noise_sigma: noise.image_noise_sigma, illumination_scale: 1.0, rng_seed: render_seed };
        let (l, r) = render_views(&scene, rig)?;
        let dl = detector.detect(&l, &rig.left)?;
        let dr = detector.detect(&r, &rig.right)?;
        let score = dl.score.min(dr.score);
        (dl.pixels, dr.pixels, score)
    } else {
        let mut l = Vec::new();
        let mut r = Vec::new();
        for pin in &model.pins {
            let (a, b) = rig.project(&pose_world.apply(&pin.center)).map_err(SceneError::from)?;
            l.push(LabeledPixel { label: pin.label.clone(), x: a.0, y: a.1 });
            r.push(LabeledPixel { label: pin.label.clone(), x: b.0, y: b.1 });
        }
        (l, r, 1.0)
    };
    if noise.keypoint_sigma_px > 0.0 {
        let n = Normal::new(0.0, noise.keypoint_sigma_px).expect("positive sigma");
        for p in left.iter_mut().chain(right.iter_mut()) {
            p.x += n.sample(rng);
            p.y += n.sample(rng);
        }
    }
    Ok(StereoObservation { left, right, score })
}

/// Model pose in the camera-1 frame from a stereo observation.
pub fn estimate_in_cam1(rig: &StereoRig, model: &PortModel, obs: &StereoObservation, method: TriangulationMethod) -> Result<Transform3D, PipelineError> {
    let points = triangulate_port_points(rig, &obs.left, &obs.right, method)?;
    Ok(estimate_port_pose(&points, model, None)?.pose)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub n_poses: usize,
    pub noise: NoiseProfile,
    pub seed: u64,
    pub method: TriangulationMethod,
    pub min_score: f64,
}

impl CalibrationConfig {
    pub fn new(n_poses: usize, noise: NoiseProfile, seed: u64) -> Self {
        Self { n_poses, noise, seed, method: TriangulationMethod::Rays, min_score: DEFAULT_MIN_SCORE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub result: CalibrationResult,
    pub presented: usize,
    pub accepted: usize,
    /// Presentations dropped for a low match score.
    pub rejected: usize,
    /// Presentations the arm could not reach or detection failed on.
    pub failed: usize,
    /// Errors against the simulated ground truth.
    pub base_cam_translation_error: f64,
    pub base_cam_rotation_error: f64,
    pub flange_tip_translation_error: f64,
    pub flange_tip_rotation_error: f64,
}

/// Presents the plug to the cameras at randomized poses, detects it, and
/// solves for the camera and tool transforms.
pub fn run_calibration(world: &WorldLayout, cfg: &CalibrationConfig) -> Result<CalibrationReport, PipelineError> {
    if cfg.n_poses < 3 {
        return Err(CalibrationError::TooFewPoses(cfg.n_poses).into());
    }
    let plug = assets::plug_model()?;
    let detector = PortDetector::new(&plug, &world.rig.left, WORKING_DEPTH)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let tool_inv = world.flange_from_tip.inverse();
    let ik = tracking_ik();
    let mut pairs = Vec::new();
    let (mut presented, mut failed) = (0, 0);
    let deg = |d: f64| d.to_radians();
    while pairs.iter().filter(|p: &&PosePair| p.match_score >= cfg.min_score).count() < cfg.n_poses && presented < 3 * cfg.n_poses {
        presented += 1;
        let rot = Rotation3::rot_x(PI)
            .mul(&Rotation3::rot_z(rng.random_range(-deg(20.0)..deg(20.0))))
            .mul(&Rotation3::rot_y(rng.random_range(-deg(20.0)..deg(20.0))))
            .mul(&Rotation3::rot_x(rng.random_range(-deg(20.0)..deg(20.0))));
        let pos = Vec3::new(rng.random_range(-0.06..0.06), rng.random_range(-0.045..0.045), WORKING_DEPTH + rng.random_range(-0.03..0.03));
        let tip_cam = Transform3D::new(rot, pos);
        let tip_base = world.rig.world_from_cam1.compose(&tip_cam);
        let Ok(q) = inverse_kinematics_with(&world.chain, &tip_base.compose(&tool_inv), &world.q_present, &ik) else {
            failed += 1;
            continue;
        };
        let base_from_flange = forward_kinematics(&world.chain, &q)?;
        let truth = base_from_flange.compose(&world.flange_from_tip);
        let observed = observe(&world.rig, &plug, &truth, &detector, &cfg.noise, &mut rng).and_then(|obs| {
            let pose = estimate_in_cam1(&world.rig, &plug, &obs, cfg.method)?;
            Ok((pose, obs.score))
        });
        match observed {
            Ok((cam_from_tip, match_score)) => pairs.push(PosePair { base_from_flange, cam_from_tip, match_score }),
            Err(_) => failed += 1,
        }
    }
    let (inliers, outliers) = reject_outliers(&pairs, cfg.min_score);
    let result = calibrate(&inliers)?;
    let y_true = world.base_from_cam();
    Ok(CalibrationReport {
        base_cam_translation_error: (result.base_from_cam.translation - y_true.translation).norm(),
        base_cam_rotation_error: result.base_from_cam.rotation.angle_to(&y_true.rotation),
        flange_tip_translation_error: (result.flange_from_tip.translation - world.flange_from_tip.translation).norm(),
        flange_tip_rotation_error: result.flange_from_tip.rotation.angle_to(&world.flange_from_tip.rotation),
        result,
        presented,
        accepted: inliers.len(),
        rejected: outliers.len(),
        failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub port_kind: PortKind,
    pub port_angles_deg: Vec<f64>,
    pub runs_per_angle: usize,
    pub noise: NoiseProfile,
    pub seed: u64,
    pub force_threshold: f64,
    pub method: TriangulationMethod,
    pub tolerances: InsertionTolerances,
}

impl ExperimentConfig {
    pub fn new(port_kind: PortKind, port_angles_deg: Vec<f64>, runs_per_angle: usize, noise: NoiseProfile, seed: u64) -> Self {
        Self {
            port_kind,
            port_angles_deg,
            runs_per_angle,
            noise,
            seed,
            force_threshold: DEFAULT_FORCE_THRESHOLD,
            method: TriangulationMethod::Rays,
            tolerances: InsertionTolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub port_angle_deg: f64,
    pub category: Option<InsertionCategory>,
    pub table_label: String,
    pub residual_angle_deg: Option<f64>,
    pub max_force: f64,
    pub halted: bool,
    pub halt_time: Option<f64>,
    pub final_depth: f64,
    pub detection_score: f64,
    pub pose_translation_error: Option<f64>,
    pub pose_rotation_error_deg: Option<f64>,
    pub waypoints_reached: usize,
    pub samples: usize,
    /// Reversed waypoints from the log equal the unplug plan.
    pub unplug_plan_matches: bool,
    /// Distance between the tip after unplug replay and the recorded approach pose.
    pub unplug_return_error: Option<f64>,
    pub error: Option<String>,
}

impl RunRecord {
    fn failed(run_index: usize, port_angle_deg: f64, error: String) -> Self {
        Self {
            run_index,
            port_angle_deg,
            category: None,
            table_label: "Error".into(),
            residual_angle_deg: None,
            max_force: 0.0,
            halted: false,
            halt_time: None,
            final_depth: 0.0,
            detection_score: 0.0,
            pose_translation_error: None,
            pose_rotation_error_deg: None,
            waypoints_reached: 0,
            samples: 0,
            unplug_plan_matches: false,
            unplug_return_error: None,
            error: Some(error),
        }
    }
}

/// Everything a batch of runs shares.
pub struct Experiment<'a> {
    pub world: &'a WorldLayout,
    pub calibration: &'a CalibrationResult,
    pub config: &'a ExperimentConfig,
    port: PortModel,
    detector: PortDetector,
    contact: ContactModel,
}

impl<'a> Experiment<'a> {
    pub fn new(world: &'a WorldLayout, calibration: &'a CalibrationResult, config: &'a ExperimentConfig) -> Result<Self, PipelineError> {
        let port = assets::port_model(config.port_kind)?;
        let plug = assets::plug_model()?;
        let detector = PortDetector::new(&port, &world.rig.left, WORKING_DEPTH)?;
        let contact = ContactModel::new(&port, &plug, config.tolerances);
        Ok(Self { world, calibration, config, port, detector, contact })
    }

    pub fn run_all(&self) -> Vec<RunRecord> {
        let mut out = Vec::new();
        for &angle in &self.config.port_angles_deg {
            for _ in 0..self.config.runs_per_angle {
                out.push(self.run(out.len(), angle));
            }
        }
        out
    }

    /// One render → detect → plan → execute → unplug cycle. Failures are
    /// recorded, never propagated.
    pub fn run(&self, run_index: usize, angle_deg: f64) -> RunRecord {
        self.try_run(run_index, angle_deg).unwrap_or_else(|e| RunRecord::failed(run_index, angle_deg, e.to_string()))
    }

    fn try_run(&self, run_index: usize, angle_deg: f64) -> Result<RunRecord, PipelineError> {
        let world = self.world;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1000 + run_index as u64);
        let jitter = jitter_rotation(&mut rng, self.config.noise.port_jitter_deg);
        let port_true = world.port_pose(angle_deg.to_radians(), &jitter);

        let obs = observe(&world.rig, &self.port, &port_true, &self.detector, &self.config.noise, &mut rng)?;
        let cam_from_port = estimate_in_cam1(&world.rig, &self.port, &obs, self.config.method)?;
        let port_est = self.calibration.base_from_cam.compose(&cam_from_port);

        let params = PlanParams { insertion_depth: self.port.insertion_depth, ..PlanParams::default() };
        let standby_flange = world.standby_pose.compose(&self.calibration.flange_from_tip.inverse());
        let q_standby = inverse_kinematics_with(&world.chain, &standby_flange, &world.q_work, &tracking_ik())?;
        let plan = plan_plug_in(&world.chain, &port_est, self.calibration, &world.standby_pose, &world.q_work, &params)?;
        let sim = SimWorld { port_pose: port_true, flange_from_tip: world.flange_from_tip, contact: self.contact.clone(), force_threshold: self.config.force_threshold };
        let log = execute(&plan, &world.chain, &JointState::at_rest(q_standby), &sim);
        let result = insertion_result(&log, &sim);

        let path = plan_unplug(&log)?;
        let expected: Vec<Transform3D> = log.waypoints_reached.iter().rev().copied().chain(std::iter::once(log.standby_pose)).collect();
        let final_state = log.final_state().copied().unwrap_or(JointState::at_rest(q_standby));
        let back = replay(&world.chain, &final_state, &path, &plan.flange_from_tip, 0.1, Some(&sim));
        let approach_index = path.len() - 2;
        let unplug_return_error = back.waypoints_reached.get(approach_index).map(|p| (p.translation - log.waypoints_reached[0].translation).norm());

        let (r_err, t_err) = port_est.distance(&port_true);
        let mut rec = RunRecord {
            run_index,
            port_angle_deg: angle_deg,
            category: result.map(|r| r.category),
            table_label: result.map_or("Error", |r| r.category.table_label()).into(),
            residual_angle_deg: result.map(|r| r.residual_angle.to_degrees()),
            max_force: result.map_or(0.0, |r| r.max_force),
            halted: log.halt.is_some(),
            halt_time: log.halt.as_ref().map(|h| h.t),
            final_depth: result.map_or(0.0, |r| r.final_depth),
            detection_score: obs.score,
            pose_translation_error: Some(t_err),
            pose_rotation_error_deg: Some(r_err.to_degrees()),
            waypoints_reached: log.waypoints_reached.len(),
            samples: log.samples.len(),
            unplug_plan_matches: path == expected,
            unplug_return_error,
            error: None,
        };
        if result.is_none() {
            rec.error = Some(match &log.halt {
                Some(h) => format!("execution stopped: {:?}", h.reason),
                None => "plug did not reach the seated depth".into(),
            });
        }
        Ok(rec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub full: usize,
    pub partial: usize,
    pub failed: usize,
    pub errors: usize,
}

impl Summary {
    pub fn of(records: &[RunRecord]) -> Self {
        let mut s = Self { runs: records.len(), ..Self::default() };
        for r in records {
            match r.category {
                Some(InsertionCategory::FullInsertion) => s.full += 1,
                Some(InsertionCategory::PartialMisalignment) => s.partial += 1,
                Some(InsertionCategory::HaltedMissedRotation) => s.failed += 1,
                None => s.errors += 1,
            }
        }
        s
    }

    pub fn success_rate(&self) -> f64 {
        if self.runs == 0 {
            0.0
        } else {
            (self.full + self.partial) as f64 / self.runs as f64
        }
    }
}

/// Result of matching the frontal template against a port rendered at a
/// viewing angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewingTrial {
    pub score: f64,
    /// Distance between the match origin and the projected port origin, px.
    pub localization_error: f64,
}

/// Renders `model` in camera 1 turned by `angle` with fresh noise and
/// matches the detector's template against it.
pub fn viewing_angle_trial(rig: &StereoRig, model: &PortModel, detector: &PortDetector, angle: f64, noise_sigma: f64, seed: u64) -> Result<ViewingTrial, PipelineError> {
    let pose = rig.world_from_cam1.compose(&port_in_cam1(angle, WORKING_DEPTH));
    let scene = SceneConfig { port_pose: pose, port: model.clone(), pixel_noise_sigma: noise_sigma, illumination_scale: 1.0, rng_seed: seed };
    let (left, _) = render_views(&scene, rig)?;
    let m = detector.best_match(&left.to_f32())?;
    let (x, y) = project_pinhole(&rig.left, &rig.world_from_cam1.inverse().apply(&pose.translation)).map_err(SceneError::from)?;
    let (u, v) = rig.left.to_buffer(x, y);
    Ok(ViewingTrial { score: m.score, localization_error: (m.tx - u).hypot(m.ty - v) })
}
