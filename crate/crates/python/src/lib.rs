//! Python bindings: stereo geometry, rendering and detection, calibration,
//! plug-in experiments and the arm's kinematics and planner.

use evplug_core::assets;
use evplug_core::geometry::{Transform3D, Vec3};
use evplug_core::pipeline::{self, CalibrationConfig, CalibrationReport, ExperimentConfig, NoiseProfile, PortDetector, RunRecord, StereoObservation, Summary, WorldLayout, WORKING_DEPTH};
use evplug_core::planner::{self, Aabb, CollisionSpheres, CollisionWorld, RrtParams};
use evplug_core::robot::{self, DhChain, Joints};
use evplug_core::scene::{self, PortKind, PortModel};
use evplug_core::triangulation::{self, TriangulationMethod};
use evplug_core::{json, pose};
use nalgebra::Matrix4;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

type Mat4 = [[f64; 4]; 4];

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn port_kind(name: &str) -> PyResult<PortKind> {
    match name {
        "type1" => Ok(PortKind::Type1),
        "type2" => Ok(PortKind::Type2),
        other => Err(PyValueError::new_err(format!("unknown port type {other:?} (expected type1 or type2)"))),
    }
}

fn method(name: &str) -> PyResult<TriangulationMethod> {
    match name {
        "rays" => Ok(TriangulationMethod::Rays),
        "eq1" => Ok(TriangulationMethod::Eq1),
        other => Err(PyValueError::new_err(format!("unknown triangulation method {other:?} (expected rays or eq1)"))),
    }
}

fn noise(name: &str) -> PyResult<NoiseProfile> {
    NoiseProfile::preset(name).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn world() -> PyResult<WorldLayout> {
    WorldLayout::standard().map_err(runtime)
}

fn to_rows(t: &Transform3D) -> Mat4 {
    let m = t.to_matrix4();
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn from_rows(rows: Mat4) -> PyResult<Transform3D> {
    Transform3D::from_matrix4(&Matrix4::from_fn(|i, j| rows[i][j])).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    json::to_string(value).map_err(runtime)
}

/// Verged stereo pair with camera 1 at the world origin.
#[pyclass(name = "StereoRig", module = "evplug", frozen)]
struct PyStereoRig {
    rig: scene::StereoRig,
}

#[pymethods]
impl PyStereoRig {
    #[new]
    #[pyo3(signature = (focal=pipeline::FOCAL_PX, width=pipeline::IMAGE_WIDTH, height=pipeline::IMAGE_HEIGHT, baseline=pipeline::BASELINE, theta_deg=None))]
    fn new(focal: f64, width: u32, height: u32, baseline: f64, theta_deg: Option<f64>) -> PyResult<Self> {
        let theta = match theta_deg {
            Some(d) => d.to_radians(),
            None => world()?.rig.theta,
        };
        let intr = evplug_core::geometry::CameraIntrinsics::centered(focal, width, height).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let rig = scene::StereoRig::new(intr, intr, baseline, theta, Transform3D::identity()).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { rig })
    }

    #[getter]
    fn baseline(&self) -> f64 {
        self.rig.baseline
    }

    #[getter]
    fn theta_deg(&self) -> f64 {
        self.rig.theta.to_degrees()
    }

    /// Principal-point-relative pixels of a point in both cameras.
    fn project(&self, point: [f64; 3]) -> PyResult<((f64, f64), (f64, f64))> {
        scene::project_to_stereo(&self.rig, &Vec3::from(point)).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[pyo3(signature = (left, right, method="rays"))]
    fn triangulate(&self, left: (f64, f64), right: (f64, f64), method: &str) -> PyResult<[f64; 3]> {
        let p = triangulation::triangulate(&self.rig, left, right, self::method(method)?).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(p.into())
    }
}

/// Least-squares plane `z = A x + B y + C`; returns `(A, B, C, rms_residual)`.
#[pyfunction]
fn fit_plane(points: Vec<[f64; 3]>) -> PyResult<(f64, f64, f64, f64)> {
    let pts: Vec<Vec3> = points.into_iter().map(Vec3::from).collect();
    let f = pose::fit_plane_lsq(&pts).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((f.A, f.B, f.C, f.rms_residual))
}

/// Rendered stereo pair of a charging port with its true pose.
#[pyclass(name = "Frame", module = "evplug", frozen)]
struct PyFrame {
    kind: PortKind,
    port_pose: Transform3D,
    left: evplug_core::image::GrayImage,
    right: evplug_core::image::GrayImage,
}

#[pymethods]
impl PyFrame {
    #[getter]
    fn width(&self) -> usize {
        self.left.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.left.height
    }

    /// Row-major 8-bit pixels of `camera` ("left" or "right").
    #[pyo3(signature = (camera="left"))]
    fn pixels<'py>(&self, py: Python<'py>, camera: &str) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.image(camera)?.data))
    }

    #[pyo3(signature = (camera="left"))]
    fn to_pgm<'py>(&self, py: Python<'py>, camera: &str) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.image(camera)?.to_pgm_bytes()))
    }

    /// True port pose in camera 1 as a 4x4 row-major matrix.
    #[getter]
    fn port_pose(&self) -> Mat4 {
        to_rows(&self.port_pose)
    }
}

impl PyFrame {
    fn image(&self, camera: &str) -> PyResult<&evplug_core::image::GrayImage> {
        match camera {
            "left" => Ok(&self.left),
            "right" => Ok(&self.right),
            other => Err(PyValueError::new_err(format!("unknown camera {other:?} (expected left or right)"))),
        }
    }
}

/// Renders the port framed at `angle_deg` under a noise preset.
#[pyfunction]
#[pyo3(signature = (port_type="type2", angle_deg=30.0, seed=0, noise="lab"))]
fn render(port_type: &str, angle_deg: f64, seed: u64, noise: &str) -> PyResult<PyFrame> {
    let w = world()?;
    let kind = port_kind(port_type)?;
    let model = assets::port_model(kind).map_err(runtime)?;
    let scene = pipeline::frame_scene(&w, &model, angle_deg, &self::noise(noise)?, seed);
    let (left, right) = scene::render_views(&scene, &w.rig).map_err(runtime)?;
    let port_pose = w.rig.world_from_cam1.inverse().compose(&scene.port_pose);
    Ok(PyFrame { kind, port_pose, left, right })
}

/// Port pose recovered from a stereo frame.
#[pyclass(name = "Detection", module = "evplug", frozen, get_all)]
struct PyDetection {
    /// Lower of the two per-view match scores.
    score: f64,
    left: Vec<(String, f64, f64)>,
    right: Vec<(String, f64, f64)>,
    /// Estimated port pose in camera 1, 4x4 row-major.
    pose: Mat4,
    translation_error: f64,
    rotation_error_deg: f64,
}

/// Template matcher for one port type, built from its frontal view.
#[pyclass(name = "Detector", module = "evplug", frozen)]
struct PyDetector {
    kind: PortKind,
    model: PortModel,
    detector: PortDetector,
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (port_type="type2"))]
    fn new(port_type: &str) -> PyResult<Self> {
        let kind = port_kind(port_type)?;
        let model = assets::port_model(kind).map_err(runtime)?;
        let detector = PortDetector::new(&model, &world()?.rig.left, WORKING_DEPTH).map_err(runtime)?;
        Ok(Self { kind, model, detector })
    }

    /// Matches both views, triangulates the pins and fits the port pose.
    #[pyo3(signature = (frame, method="rays"))]
    fn detect(&self, frame: &PyFrame, method: &str) -> PyResult<PyDetection> {
        if frame.kind != self.kind {
            return Err(PyValueError::new_err(format!("frame shows a {:?} port but the detector was built for {:?}", frame.kind, self.kind)));
        }
        let w = world()?;
        let dl = self.detector.detect(&frame.left, &w.rig.left).map_err(runtime)?;
        let dr = self.detector.detect(&frame.right, &w.rig.right).map_err(runtime)?;
        let obs = StereoObservation { left: dl.pixels, right: dr.pixels, score: dl.score.min(dr.score) };
        let est = pipeline::estimate_in_cam1(&w.rig, &self.model, &obs, self::method(method)?).map_err(runtime)?;
        let (rot, trans) = est.distance(&frame.port_pose);
        let pins = |v: &[triangulation::LabeledPixel]| v.iter().map(|p| (p.label.clone(), p.x, p.y)).collect();
        Ok(PyDetection { score: obs.score, left: pins(&obs.left), right: pins(&obs.right), pose: to_rows(&est), translation_error: trans, rotation_error_deg: rot.to_degrees() })
    }
}

/// Camera-to-base and flange-to-plug calibration with its diagnostics.
#[pyclass(name = "Calibration", module = "evplug", frozen)]
struct PyCalibration {
    report: CalibrationReport,
}

#[pymethods]
impl PyCalibration {
    #[getter]
    fn mean_translation_error(&self) -> f64 {
        self.report.result.mean_translation_error
    }

    #[getter]
    fn base_cam_translation_error(&self) -> f64 {
        self.report.base_cam_translation_error
    }

    #[getter]
    fn base_cam_rotation_error(&self) -> f64 {
        self.report.base_cam_rotation_error
    }

    #[getter]
    fn accepted(&self) -> usize {
        self.report.accepted
    }

    #[getter]
    fn presented(&self) -> usize {
        self.report.presented
    }

    #[getter]
    fn base_from_cam(&self) -> Mat4 {
        to_rows(&self.report.result.base_from_cam)
    }

    #[getter]
    fn flange_from_tip(&self) -> Mat4 {
        to_rows(&self.report.result.flange_from_tip)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.report)
    }
}

#[pyfunction]
#[pyo3(signature = (poses=26, noise="lab", seed=0))]
fn calibrate(poses: usize, noise: &str, seed: u64) -> PyResult<PyCalibration> {
    let report = pipeline::run_calibration(&world()?, &CalibrationConfig::new(poses, self::noise(noise)?, seed)).map_err(runtime)?;
    Ok(PyCalibration { report })
}

/// Outcome of one plug-in and unplug run.
#[pyclass(name = "Run", module = "evplug", frozen)]
struct PyRun {
    record: RunRecord,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn run_index(&self) -> usize {
        self.record.run_index
    }

    #[getter]
    fn port_angle_deg(&self) -> f64 {
        self.record.port_angle_deg
    }

    /// "FullInsertion", "PartialMisalignment", "HaltedMissedRotation" or None after an error.
    #[getter]
    fn category(&self) -> Option<String> {
        self.record.category.map(|c| format!("{c:?}"))
    }

    #[getter]
    fn label(&self) -> String {
        self.record.table_label.clone()
    }

    #[getter]
    fn residual_angle_deg(&self) -> Option<f64> {
        self.record.residual_angle_deg
    }

    #[getter]
    fn halted(&self) -> bool {
        self.record.halted
    }

    #[getter]
    fn final_depth(&self) -> f64 {
        self.record.final_depth
    }

    #[getter]
    fn max_force(&self) -> f64 {
        self.record.max_force
    }

    #[getter]
    fn unplug_plan_matches(&self) -> bool {
        self.record.unplug_plan_matches
    }

    #[getter]
    fn error(&self) -> Option<String> {
        self.record.error.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.record)
    }

    fn __repr__(&self) -> String {
        format!("Run({}, {}°, {})", self.record.run_index, self.record.port_angle_deg, self.record.table_label)
    }
}

/// Plug-in runs at each angle, using `calibration` for the camera and tool.
#[pyfunction]
#[pyo3(signature = (calibration, port_type="type2", angles_deg=vec![10.0, 30.0], runs=5, noise="lab", seed=0))]
fn run_experiment(calibration: &PyCalibration, port_type: &str, angles_deg: Vec<f64>, runs: usize, noise: &str, seed: u64) -> PyResult<Vec<PyRun>> {
    let w = world()?;
    let cfg = ExperimentConfig::new(port_kind(port_type)?, angles_deg, runs, self::noise(noise)?, seed);
    let exp = pipeline::Experiment::new(&w, &calibration.report.result, &cfg).map_err(runtime)?;
    Ok(exp.run_all().into_iter().map(|record| PyRun { record }).collect())
}

/// Counts as `(full, partial, failed, errors, success_rate)`.
#[pyfunction]
fn summarize(runs: Vec<PyRef<'_, PyRun>>) -> (usize, usize, usize, usize, f64) {
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let s = Summary::of(&records);
    (s.full, s.partial, s.failed, s.errors, s.success_rate())
}

/// The six-joint arm: kinematics and collision-free planning.
#[pyclass(name = "Robot", module = "evplug", frozen)]
struct PyRobot {
    chain: DhChain,
}

#[pymethods]
impl PyRobot {
    #[new]
    fn new() -> PyResult<Self> {
        Ok(Self { chain: assets::ur10_chain().map_err(runtime)? })
    }

    fn forward_kinematics(&self, q: [f64; 6]) -> PyResult<Mat4> {
        Ok(to_rows(&robot::forward_kinematics(&self.chain, &Joints::from(q)).map_err(|e| PyValueError::new_err(e.to_string()))?))
    }

    fn inverse_kinematics(&self, target: Mat4, seed: [f64; 6]) -> PyResult<[f64; 6]> {
        let q = robot::inverse_kinematics(&self.chain, &from_rows(target)?, &Joints::from(seed)).map_err(runtime)?;
        Ok(q.into())
    }

    /// Geometric Jacobian, rows `[v; ω]`.
    fn jacobian(&self, q: [f64; 6]) -> PyResult<[[f64; 6]; 6]> {
        let j = robot::jacobian(&self.chain, &Joints::from(q)).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(std::array::from_fn(|i| std::array::from_fn(|k| j[(i, k)])))
    }

    /// RRT-connect path between joint configurations around axis-aligned
    /// boxes given as `(min_xyz, max_xyz)`.
    #[pyo3(signature = (start, goal, boxes, seed=0))]
    fn plan(&self, start: [f64; 6], goal: [f64; 6], boxes: Vec<([f64; 3], [f64; 3])>, seed: u64) -> PyResult<Vec<[f64; 6]>> {
        let boxes = boxes
            .into_iter()
            .map(|(lo, hi)| Aabb::new(Vec3::from(lo), Vec3::from(hi)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let world = CollisionWorld { boxes };
        let path = planner::rrt_connect(&self.chain, &Joints::from(start), &Joints::from(goal), &world, &CollisionSpheres::default(), &RrtParams::default(), seed).map_err(runtime)?;
        Ok(path.into_iter().map(Into::into).collect())
    }
}

#[pymodule]
pub fn evplug(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStereoRig>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyCalibration>()?;
    m.add_class::<PyRun>()?;
    m.add_class::<PyRobot>()?;
    m.add_function(wrap_pyfunction!(fit_plane, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add("WORKING_DEPTH", WORKING_DEPTH)?;
    Ok(())
}
