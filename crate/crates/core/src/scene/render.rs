use crate::geometry::{project_pinhole, CameraIntrinsics, Transform3D, Vec3};
use crate::image::GrayImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{PortModel, SceneError, StereoRig};

pub const BACKGROUND_LEVEL: f64 = 200.0;
pub const FEATURE_LEVEL: f64 = 30.0;
pub const SUPERSAMPLE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Port pose in the world frame.
    pub port_pose: Transform3D,
    pub port: PortModel,
    /// Standard deviation of additive per-pixel noise, grey levels.
    pub pixel_noise_sigma: f64,
    pub illumination_scale: f64,
    pub rng_seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.port.validate()?;
        if !(self.pixel_noise_sigma >= 0.0) {
            return Err(SceneError::InvalidScene(format!("pixel noise sigma {} must be >= 0", self.pixel_noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.illumination_scale) {
            return Err(SceneError::InvalidScene(format!("illumination scale {} outside [0, 1]", self.illumination_scale)));
        }
        Ok(())
    }
}

/// Renders the port into both cameras of the rig as dark anti-aliased
/// features on a uniform background.
pub fn render_views(scene: &SceneConfig, rig: &StereoRig) -> Result<(GrayImage, GrayImage), SceneError> {
    scene.validate()?;
    let cams = [(rig.left, rig.world_from_cam1), (rig.right, rig.world_from_cam2())];
    for (intr, world_from_cam) in &cams {
        if !any_feature_visible(&scene.port, &scene.port_pose, intr, world_from_cam) {
            return Err(SceneError::PortOutOfView);
        }
    }
    let mut out = cams.iter().enumerate().map(|(stream, (intr, world_from_cam))| {
        let coverage = rasterize_coverage(&scene.port, &scene.port_pose, intr, world_from_cam, SUPERSAMPLE);
        shade(&coverage, intr, scene, stream as u64)
    });
    let left = out.next().unwrap();
    let right = out.next().unwrap();
    Ok((left, right))
}

fn any_feature_visible(port: &PortModel, port_pose: &Transform3D, intr: &CameraIntrinsics, world_from_cam: &Transform3D) -> bool {
    let cam_from_port = world_from_cam.inverse().compose(port_pose);
    let pins = port.pins.iter().map(|p| p.center);
    let outline = port.outline.iter().flat_map(|o| o.sample_points(32)).map(|[u, v]| Vec3::new(u, v, 0.0));
    pins.chain(outline).any(|p| match project_pinhole(intr, &cam_from_port.apply(&p)) {
        Ok((x, y)) => {
            let (u, v) = intr.to_buffer(x, y);
            intr.contains_buffer(u, v)
        }
        Err(_) => false,
    })
}

/// Fractional coverage of dark features per pixel. Pixel `(i, j)` is
/// centered on buffer coordinate `(i, j)`.
pub fn rasterize_coverage(port: &PortModel, port_pose: &Transform3D, intr: &CameraIntrinsics, world_from_cam: &Transform3D, supersample: usize) -> Vec<f32> {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let mut coverage = vec![0f32; w * h];
    let port_from_cam = port_pose.inverse().compose(world_from_cam);
    let cam_from_port = port_from_cam.inverse();
    let rot = *port_from_cam.rotation.matrix();
    let origin = port_from_cam.translation;

    // Bounding box of the port face; fall back to the full frame when a
    // corner is behind the camera.
    let e = port.extent() * 1.05;
    let mut bbox = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut full = false;
    for (cu, cv) in [(-e, -e), (e, -e), (e, e), (-e, e)] {
        match project_pinhole(intr, &cam_from_port.apply(&Vec3::new(cu, cv, 0.0))) {
            Ok((x, y)) => {
                let (u, v) = intr.to_buffer(x, y);
                bbox = (bbox.0.min(u), bbox.1.min(v), bbox.2.max(u), bbox.3.max(v));
            }
            Err(_) => full = true,
        }
    }
    let (x0, y0, x1, y1) = if full {
        (0, 0, w - 1, h - 1)
    } else {
        let clampx = |v: f64| v.clamp(0.0, (w - 1) as f64) as usize;
        let clampy = |v: f64| v.clamp(0.0, (h - 1) as f64) as usize;
        (clampx(bbox.0.floor() - 1.0), clampy(bbox.1.floor() - 1.0), clampx(bbox.2.ceil() + 1.0), clampy(bbox.3.ceil() + 1.0))
    };
    if !full && (bbox.0 > w as f64 || bbox.1 > h as f64 || bbox.2 < 0.0 || bbox.3 < 0.0) {
        return coverage;
    }

    let n = supersample.max(1);
    let weight = 1.0 / (n * n) as f32;
    let offsets: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64 - 0.5).collect();
    for j in y0..=y1 {
        for i in x0..=x1 {
            let mut hits = 0usize;
            for oy in &offsets {
                for ox in &offsets {
                    let (x, y) = intr.from_buffer(i as f64 + ox, j as f64 + oy);
                    let d = rot * Vec3::new(x / intr.f, y / intr.f, 1.0);
                    if d.z.abs() < 1e-12 {
                        continue;
                    }
                    let s = -origin.z / d.z;
                    if s <= 0.0 {
                        continue;
                    }
                    if port.is_dark(origin.x + s * d.x, origin.y + s * d.y) {
                        hits += 1;
                    }
                }
            }
            coverage[j * w + i] = hits as f32 * weight;
        }
    }
    coverage
}

fn shade(coverage: &[f32], intr: &CameraIntrinsics, scene: &SceneConfig, stream: u64) -> GrayImage {
    let (w, h) = (intr.width as usize, intr.height as usize);
    let bg = BACKGROUND_LEVEL * scene.illumination_scale;
    let fg = FEATURE_LEVEL * scene.illumination_scale;
    let mut img = GrayImage::new(w, h, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed);
    rng.set_stream(stream);
    let sigma = scene.pixel_noise_sigma;
    for (px, &c) in img.data.iter_mut().zip(coverage) {
        let mut v = bg + c as f64 * (fg - bg);
        if sigma > 0.0 {
            let n: f64 = StandardNormal.sample(&mut rng);
            v += sigma * n;
        }
        *px = v.round().clamp(0.0, 255.0) as u8;
    }
    img
}
