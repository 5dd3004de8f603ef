//! The subcommands. Each writes deterministic JSON into the output directory
//! and returns the text printed on stdout.

use crate::config::{PortType, Settings};
use crate::log::{summary_text, write_csv, CalibrationEcho, LogHeader, RunLog};
use anyhow::{Context, Result};
use evplug_core::assets;
use evplug_core::calibration::{CalibrationError, CalibrationResult};
use evplug_core::geometry::{Transform3D, Vec3};
use evplug_core::image::GrayImage;
use evplug_core::json;
use evplug_core::pipeline::{
    estimate_in_cam1, frame_scene, run_calibration, CalibrationConfig, CalibrationReport, Experiment, ExperimentConfig, NoiseProfile, PipelineError, PortDetector,
    StereoObservation, Summary, ViewDetection, WorldLayout, WORKING_DEPTH,
};
use evplug_core::scene::render_views;
use evplug_core::triangulation::TriangulationMethod;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const LEFT_IMAGE: &str = "left.pgm";
pub const RIGHT_IMAGE: &str = "right.pgm";
pub const GROUND_TRUTH: &str = "ground_truth.json";
pub const DETECTIONS: &str = "detections.json";
pub const CALIBRATION: &str = "calibration.json";
pub const RUN_LOG: &str = "runs.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const REPORT_CSV: &str = "report.csv";

const SCHEMA_VERSION: u32 = crate::log::SCHEMA_VERSION;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinTruth {
    pub label: String,
    /// Principal-point-relative projections, px.
    pub left: [f64; 2],
    pub right: [f64; 2],
    pub point_cam1: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub schema_version: u32,
    pub port_type: PortType,
    pub port_angle_deg: f64,
    pub seed: u64,
    pub noise: NoiseProfile,
    pub port_pose_base: Transform3D,
    pub port_pose_cam1: Transform3D,
    pub pins: Vec<PinTruth>,
}

/// Renders the stereo pair for the first configured port angle.
pub fn render(settings: &Settings, out: &Path) -> Result<String> {
    let world = WorldLayout::standard()?;
    let model = assets::port_model(settings.port_type.into())?;
    let angle = settings.port_angles_deg[0];
    let scene = frame_scene(&world, &model, angle, &settings.noise, settings.seed);
    let (left, right) = render_views(&scene, &world.rig)?;
    let cam1_from_base = world.rig.world_from_cam1.inverse();
    let pins = model
        .pins
        .iter()
        .map(|pin| {
            let p = scene.port_pose.apply(&pin.center);
            let (l, r) = world.rig.project(&p)?;
            Ok(PinTruth { label: pin.label.clone(), left: [l.0, l.1], right: [r.0, r.1], point_cam1: cam1_from_base.apply(&p) })
        })
        .collect::<Result<Vec<_>, evplug_core::geometry::GeometryError>>()?;
    let truth = GroundTruth {
        schema_version: SCHEMA_VERSION,
        port_type: settings.port_type,
        port_angle_deg: angle,
        seed: settings.seed,
        noise: settings.noise.clone(),
        port_pose_base: scene.port_pose,
        port_pose_cam1: cam1_from_base.compose(&scene.port_pose),
        pins,
    };
    create_dir(out)?;
    fs::write(out.join(LEFT_IMAGE), left.to_pgm_bytes())?;
    fs::write(out.join(RIGHT_IMAGE), right.to_pgm_bytes())?;
    write_json(&out.join(GROUND_TRUTH), &truth)?;
    Ok(format!("rendered {:?} port at {angle}° into {}\n", settings.port_type, out.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthError {
    pub translation_m: f64,
    pub rotation_deg: f64,
    pub max_pixel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutput {
    pub schema_version: u32,
    pub port_type: PortType,
    pub method: TriangulationMethod,
    pub left: ViewDetection,
    pub right: ViewDetection,
    pub port_pose_cam1: Transform3D,
    /// Present when the directory holds a ground-truth file from `render`.
    pub ground_truth_error: Option<TruthError>,
}

fn read_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    GrayImage::from_pgm_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Detects the port in `left.pgm` / `right.pgm` of the output directory,
/// rendering them first when absent, and estimates its pose.
pub fn detect(settings: &Settings, out: &Path) -> Result<String> {
    let mut text = String::new();
    if !out.join(LEFT_IMAGE).exists() || !out.join(RIGHT_IMAGE).exists() {
        text.push_str(&render(settings, out)?);
    }
    let world = WorldLayout::standard()?;
    let model = assets::port_model(settings.port_type.into())?;
    let detector = PortDetector::new(&model, &world.rig.left, WORKING_DEPTH)?;
    let left = detector.detect(&read_image(&out.join(LEFT_IMAGE))?, &world.rig.left)?;
    let right = detector.detect(&read_image(&out.join(RIGHT_IMAGE))?, &world.rig.right)?;
    let obs = StereoObservation { left: left.pixels.clone(), right: right.pixels.clone(), score: left.score.min(right.score) };
    let pose = estimate_in_cam1(&world.rig, &model, &obs, settings.method)?;
    let truth_path = out.join(GROUND_TRUTH);
    let ground_truth_error = if truth_path.exists() {
        let truth: GroundTruth = serde_json::from_slice(&fs::read(&truth_path)?).with_context(|| format!("parsing {}", truth_path.display()))?;
        let (r, t) = pose.distance(&truth.port_pose_cam1);
        let mut max_px = 0.0f64;
        for pin in &truth.pins {
            for (view, expect) in [(&left, pin.left), (&right, pin.right)] {
                if let Some(p) = view.pixels.iter().find(|p| p.label == pin.label) {
                    max_px = max_px.max((p.x - expect[0]).hypot(p.y - expect[1]));
                }
            }
        }
        Some(TruthError { translation_m: t, rotation_deg: r.to_degrees(), max_pixel_error: max_px })
    } else {
        None
    };
    let output = DetectionOutput { schema_version: SCHEMA_VERSION, port_type: settings.port_type, method: settings.method, left, right, port_pose_cam1: pose, ground_truth_error };
    write_json(&out.join(DETECTIONS), &output)?;
    let _ = writeln!(text, "match scores: left {:.3}, right {:.3}", output.left.score, output.right.score);
    let t = pose.translation;
    let _ = writeln!(text, "port position in camera 1: ({:.4}, {:.4}, {:.4}) m", t.x, t.y, t.z);
    if let Some(e) = &output.ground_truth_error {
        let _ = writeln!(text, "against ground truth: {:.3} mm, {:.3}°, max pin error {:.3} px", 1e3 * e.translation_m, e.rotation_deg, e.max_pixel_error);
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutput {
    pub schema_version: u32,
    pub seed: u64,
    pub n_poses: usize,
    pub noise: NoiseProfile,
    pub report: CalibrationReport,
}

fn calibrate_sim(settings: &Settings) -> Result<CalibrationReport> {
    let world = WorldLayout::standard()?;
    let cfg = CalibrationConfig { method: settings.method, ..CalibrationConfig::new(settings.calibration_poses, settings.noise.clone(), settings.seed) };
    run_calibration(&world, &cfg).map_err(|e| match e {
        PipelineError::Calibration(CalibrationError::DegenerateMotion) => anyhow::Error::new(e)
            .context("the accepted presentations do not rotate the plug about two distinct axes; use more poses (--poses) or another --seed"),
        other => other.into(),
    })
}

pub fn calibrate(settings: &Settings, out: &Path) -> Result<String> {
    let report = calibrate_sim(settings)?;
    let output = CalibrationOutput { schema_version: SCHEMA_VERSION, seed: settings.seed, n_poses: settings.calibration_poses, noise: settings.noise.clone(), report };
    create_dir(out)?;
    write_json(&out.join(CALIBRATION), &output)?;
    let r = &output.report;
    let mut text = String::new();
    let _ = writeln!(text, "{} presentations, {} accepted, {} rejected, {} failed", r.presented, r.accepted, r.rejected, r.failed);
    let _ = writeln!(text, "mean translation error {:.4} mm", 1e3 * r.result.mean_translation_error);
    let _ = writeln!(text, "camera-to-base error vs ground truth: {:.4} mm, {:.4}°", 1e3 * r.base_cam_translation_error, r.base_cam_rotation_error.to_degrees());
    let _ = writeln!(text, "flange-to-tip error vs ground truth: {:.4} mm, {:.4}°", 1e3 * r.flange_tip_translation_error, r.flange_tip_rotation_error.to_degrees());
    Ok(text)
}

fn load_calibration(path: &Path) -> Result<CalibrationResult> {
    let text = fs::read_to_string(path).with_context(|| format!("reading calibration {}", path.display()))?;
    let cal: CalibrationOutput = serde_json::from_str(&text).with_context(|| format!("parsing calibration {}", path.display()))?;
    anyhow::ensure!(cal.schema_version == SCHEMA_VERSION, "calibration {} has schema version {}", path.display(), cal.schema_version);
    Ok(cal.report.result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryOutput {
    pub schema_version: u32,
    #[serde(flatten)]
    pub summary: Summary,
    pub success_rate: f64,
}

/// Calibrates (or loads a calibration), then runs every port angle
/// `settings.runs` times and writes the run log.
pub fn run_experiment(settings: &Settings, out: &Path) -> Result<String> {
    let world = WorldLayout::standard()?;
    let (calibration, echo) = match &settings.calibration_file {
        Some(path) => {
            let result = load_calibration(path)?;
            let echo = CalibrationEcho { source: path.display().to_string(), mean_translation_error: result.mean_translation_error, base_cam_translation_error: None, base_cam_rotation_error: None };
            (result, echo)
        }
        None => {
            let r = calibrate_sim(settings)?;
            let echo = CalibrationEcho {
                source: "generated".into(),
                mean_translation_error: r.result.mean_translation_error,
                base_cam_translation_error: Some(r.base_cam_translation_error),
                base_cam_rotation_error: Some(r.base_cam_rotation_error),
            };
            (r.result, echo)
        }
    };
    let cfg = ExperimentConfig {
        force_threshold: settings.force_threshold,
        method: settings.method,
        ..ExperimentConfig::new(settings.port_type.into(), settings.port_angles_deg.clone(), settings.runs, settings.noise.clone(), settings.seed)
    };
    let runs = Experiment::new(&world, &calibration, &cfg)?.run_all();
    let header = LogHeader {
        port_type: settings.port_type,
        port_angles_deg: settings.port_angles_deg.clone(),
        runs_per_angle: settings.runs,
        noise: settings.noise.clone(),
        seed: settings.seed,
        calibration: echo,
    };
    let log = RunLog { header: Some(header), runs };
    create_dir(out)?;
    let mut buf = Vec::new();
    log.write(&mut buf)?;
    fs::write(out.join(RUN_LOG), buf)?;
    let summary = Summary::of(&log.runs);
    write_json(&out.join(SUMMARY), &SummaryOutput { schema_version: SCHEMA_VERSION, summary, success_rate: summary.success_rate() })?;
    Ok(summary_text(&log))
}

/// Summarizes a run log and writes its CSV next to it or into `out`.
pub fn report(log_path: &Path, out: Option<&Path>) -> Result<String> {
    let log = RunLog::read(log_path)?;
    let dir: PathBuf = match out {
        Some(d) => d.to_path_buf(),
        None => log_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    create_dir(&dir)?;
    let csv_path = dir.join(REPORT_CSV);
    let mut buf = Vec::new();
    write_csv(&log, &mut buf)?;
    fs::write(&csv_path, buf).with_context(|| format!("writing {}", csv_path.display()))?;
    Ok(summary_text(&log))
}
