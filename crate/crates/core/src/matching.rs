//! Shape-based template matching on gradient orientations.
//!
//! A template is a set of edge points with unit gradient directions. The
//! score of a pose is the mean absolute cosine between the rotated template
//! directions and the image gradient directions under the rotated points, so
//! it ignores contrast polarity and global illumination gain.

use crate::image::ImageF32;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_TEMPLATE_POINTS: usize = 20;
pub const DEFAULT_MIN_SCORE: f64 = 0.7;
pub const CONFIDENT_SCORE: f64 = 0.9;
/// Coarse placements whose running mean falls below this fraction of the
/// coarse threshold are abandoned once enough points have been seen.
const GREEDINESS: f64 = 0.5;
const GREEDY_MIN_POINTS: f64 = 6.0;
/// The coarse search starts at the coarsest level with at least this many points.
const COARSE_MIN_POINTS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("image is {0}x{1}; at least 3x3 is required")]
    ImageTooSmall(usize, usize),
    #[error("template region does not fit inside the image")]
    RoiOutsideImage,
    #[error("only {0} edge points inside the template region")]
    InsufficientStructure(usize),
    #[error("invalid match parameters: {0}")]
    InvalidParameters(String),
}

/// Sobel gradients scaled by 1/8, so a vertical step reads as the central
/// difference `(I(x+1) − I(x−1)) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub width: usize,
    pub height: usize,
    pub gx: Vec<f32>,
    pub gy: Vec<f32>,
    pub mask: Vec<bool>,
}

impl GradientMap {
    /// Unit gradient directions, zero outside the mask.
    fn directions(&self) -> DirectionField {
        let mut ex = vec![0f32; self.gx.len()];
        let mut ey = vec![0f32; self.gx.len()];
        for i in 0..self.gx.len() {
            if self.mask[i] {
                let m = self.gx[i].hypot(self.gy[i]);
                ex[i] = self.gx[i] / m;
                ey[i] = self.gy[i] / m;
            }
        }
        DirectionField { width: self.width, height: self.height, ex, ey }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

pub fn gradient_map(image: &ImageF32, contrast_threshold: f32) -> Result<GradientMap, MatchError> {
    let (w, h) = (image.width, image.height);
    if w < 3 || h < 3 {
        return Err(MatchError::ImageTooSmall(w, h));
    }
    let mut gx = vec![0f32; w * h];
    let mut gy = vec![0f32; w * h];
    let mut mask = vec![false; w * h];
    let d = &image.data;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dx: isize, dy: isize| d[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            let sx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let sy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y * w + x;
            gx[i] = sx / 8.0;
            gy[i] = sy / 8.0;
            let mag = gx[i].hypot(gy[i]);
            mask[i] = mag > 0.0 && mag >= contrast_threshold;
        }
    }
    Ok(GradientMap { width: w, height: h, gx, gy, mask })
}

struct DirectionField {
    width: usize,
    height: usize,
    ex: Vec<f32>,
    ey: Vec<f32>,
}

impl DirectionField {
    #[inline]
    fn nearest(&self, x: f64, y: f64) -> (f32, f32) {
        let (xi, yi) = (x.round(), y.round());
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
            return (0.0, 0.0);
        }
        let i = yi as usize * self.width + xi as usize;
        (self.ex[i], self.ey[i])
    }

    fn bilinear(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let mut acc = (0.0, 0.0);
        for (dx, dy, wgt) in [(0.0, 0.0, (1.0 - fx) * (1.0 - fy)), (1.0, 0.0, fx * (1.0 - fy)), (0.0, 1.0, (1.0 - fx) * fy), (1.0, 1.0, fx * fy)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 || wgt == 0.0 {
                continue;
            }
            let i = yi as usize * self.width + xi as usize;
            acc.0 += wgt * self.ex[i] as f64;
            acc.1 += wgt * self.ey[i] as f64;
        }
        acc
    }
}

/// Circular region of interest in buffer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Edge point relative to the template origin, with its unit gradient direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub u: f64,
    pub v: f64,
    pub dx: f64,
    pub dy: f64,
}

/// Named location relative to the template origin, carried along with the
/// match pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub label: String,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateParams {
    /// Minimum gradient magnitude, grey levels per pixel.
    pub contrast_threshold: f32,
    /// Gaussian pre-smoothing applied before gradients, pixels.
    pub blur_sigma: f32,
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self { contrast_threshold: 10.0, blur_sigma: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeTemplate {
    pub source_roi: Roi,
    pub params: TemplateParams,
    /// Level 0 holds the full-resolution points; level `k` is expressed in
    /// pixels of the image downsampled `k` times.
    pub pyramid_levels: Vec<Vec<ModelPoint>>,
    #[serde(default)]
    pub keypoints: Vec<Keypoint>,
}

impl ShapeTemplate {
    pub fn points(&self) -> &[ModelPoint] {
        &self.pyramid_levels[0]
    }

    pub fn radius(&self) -> f64 {
        self.points().iter().map(|p| p.u.hypot(p.v)).fold(0.0, f64::max)
    }

    /// Keypoint positions in buffer coordinates under a match pose.
    pub fn place_keypoints(&self, m: &Match2D) -> Vec<(String, f64, f64)> {
        self.keypoints
            .iter()
            .map(|k| {
                let (x, y) = m.apply(k.u, k.v);
                (k.label.clone(), x, y)
            })
            .collect()
    }
}

pub fn create_template(model_image: &ImageF32, roi: Roi, params: TemplateParams) -> Result<ShapeTemplate, MatchError> {
    let (w, h) = (model_image.width, model_image.height);
    if w < 3 || h < 3 {
        return Err(MatchError::ImageTooSmall(w, h));
    }
    if roi.radius <= 0.0 || roi.cx - roi.radius < 0.0 || roi.cy - roi.radius < 0.0 || roi.cx + roi.radius > (w - 1) as f64 || roi.cy + roi.radius > (h - 1) as f64 {
        return Err(MatchError::RoiOutsideImage);
    }
    let grad = gradient_map(&model_image.gaussian_blur(params.blur_sigma), params.contrast_threshold)?;
    let mut base = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (u, v) = (x as f64 - roi.cx, y as f64 - roi.cy);
            if grad.mask[i] && u.hypot(v) <= roi.radius {
                let (gx, gy) = (grad.gx[i] as f64, grad.gy[i] as f64);
                let m = gx.hypot(gy);
                base.push((ModelPoint { u, v, dx: gx / m, dy: gy / m }, m));
            }
        }
    }
    if base.len() < MIN_TEMPLATE_POINTS {
        return Err(MatchError::InsufficientStructure(base.len()));
    }
    let mut pyramid_levels = vec![base.iter().map(|(p, _)| *p).collect::<Vec<_>>()];
    for k in 1.. {
        let target = (base.len() as f64 / 4f64.powi(k)).round() as usize;
        if target < MIN_TEMPLATE_POINTS {
            break;
        }
        pyramid_levels.push(decimate(&base, k as u32, target));
    }
    Ok(ShapeTemplate { source_roi: roi, params, pyramid_levels, keypoints: Vec::new() })
}

/// Merges points falling in the same `2^k` cell (mean position, direction of
/// the strongest member), then strides through the cells in raster order
/// until `target` points remain.
fn decimate(base: &[(ModelPoint, f64)], k: u32, target: usize) -> Vec<ModelPoint> {
    let cell = (1u32 << k) as f64;
    let mut cells: Vec<((i64, i64), f64, f64, usize, ModelPoint, f64)> = Vec::new();
    let mut keyed: Vec<((i64, i64), &(ModelPoint, f64))> = base.iter().map(|bp| (((bp.0.v / cell).floor() as i64, (bp.0.u / cell).floor() as i64), bp)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    for (key, (p, m)) in keyed {
        match cells.last_mut() {
            Some(c) if c.0 == key => {
                c.1 += p.u;
                c.2 += p.v;
                c.3 += 1;
                if *m > c.5 {
                    c.4 = *p;
                    c.5 = *m;
                }
            }
            _ => cells.push((key, p.u, p.v, 1, *p, *m)),
        }
    }
    let merged: Vec<ModelPoint> = cells
        .iter()
        .map(|c| ModelPoint { u: c.1 / c.3 as f64 / cell, v: c.2 / c.3 as f64 / cell, dx: c.4.dx, dy: c.4.dy })
        .collect();
    if merged.len() <= target {
        return merged;
    }
    (0..target).map(|i| merged[i * merged.len() / target]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match2D {
    /// Template origin in buffer coordinates.
    pub tx: f64,
    pub ty: f64,
    /// Rotation of the template, radians; positive turns +u toward +v.
    pub angle: f64,
    /// Image-axis scales applied after the rotation.
    #[serde(default = "unit")]
    pub scale_x: f64,
    #[serde(default = "unit")]
    pub scale_y: f64,
    pub score: f64,
}

fn unit() -> f64 {
    1.0
}

impl Match2D {
    /// Buffer position of a template-relative point under this pose.
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (self.tx + self.scale_x * (c * u - s * v), self.ty + self.scale_y * (s * u + c * v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub angle_range: (f64, f64),
    /// Angle step at the coarsest pyramid level.
    pub angle_step: f64,
    pub min_score: f64,
    pub max_matches: usize,
    /// Fraction of `min_score` a coarse candidate must reach to be refined.
    pub coarse_factor: f64,
    /// Optional translation window `(x0, y0, x1, y1)` in buffer coordinates.
    pub search_window: Option<(f64, f64, f64, f64)>,
    /// Ranges of the image-axis scales searched (foreshortening and
    /// distance changes); `(1, 1)` for rigid matching.
    #[serde(default = "unit_range")]
    pub scale_x_range: (f64, f64),
    #[serde(default = "unit_range")]
    pub scale_y_range: (f64, f64),
    /// Scale step at the coarsest pyramid level.
    #[serde(default = "default_scale_step")]
    pub scale_step: f64,
}

fn unit_range() -> (f64, f64) {
    (1.0, 1.0)
}

fn default_scale_step() -> f64 {
    0.05
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            angle_range: (-std::f64::consts::PI, std::f64::consts::PI),
            angle_step: 1f64.to_radians(),
            min_score: DEFAULT_MIN_SCORE,
            max_matches: 1,
            coarse_factor: 0.6,
            search_window: None,
            scale_x_range: unit_range(),
            scale_y_range: unit_range(),
            scale_step: default_scale_step(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    x: f64,
    y: f64,
    angle: f64,
    sx: f64,
    sy: f64,
    score: f64,
}

impl Pose {
    fn key(&self) -> [f64; 5] {
        [self.x, self.y, self.angle, self.sx, self.sy]
    }
}

fn cmp_poses(a: &Pose, b: &Pose) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.key().iter().zip(b.key().iter()).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
}

/// Template points and gradient directions mapped by a rotation followed by
/// axis scales. Directions use the inverse transpose.
fn warp(pts: &[ModelPoint], angle: f64, sx: f64, sy: f64) -> impl Iterator<Item = (f64, f64, f64, f64)> + '_ {
    let (s, c) = angle.sin_cos();
    pts.iter().map(move |p| {
        let (rdx, rdy) = ((c * p.dx - s * p.dy) / sx, (s * p.dx + c * p.dy) / sy);
        let n = rdx.hypot(rdy);
        (sx * (c * p.u - s * p.v), sy * (s * p.u + c * p.v), rdx / n, rdy / n)
    })
}

struct Level {
    field: DirectionField,
}

fn build_levels(image: &ImageF32, tmpl: &ShapeTemplate, count: usize) -> Result<Vec<Level>, MatchError> {
    let mut img = image.gaussian_blur(tmpl.params.blur_sigma);
    let mut levels = Vec::with_capacity(count);
    for k in 0..count {
        if k > 0 {
            img = img.downsample();
        }
        if img.width < 3 || img.height < 3 {
            break;
        }
        levels.push(Level { field: gradient_map(&img, tmpl.params.contrast_threshold)?.directions() });
    }
    Ok(levels)
}

fn score_nearest(field: &DirectionField, pts: &[ModelPoint], p: &Pose) -> f64 {
    let mut acc = 0.0f64;
    for (u, v, dx, dy) in warp(pts, p.angle, p.sx, p.sy) {
        let (ex, ey) = field.nearest(p.x + u, p.y + v);
        acc += (dx * ex as f64 + dy * ey as f64).abs();
    }
    acc / pts.len() as f64
}

fn score_bilinear(field: &DirectionField, pts: &[ModelPoint], p: &Pose) -> f64 {
    let mut acc = 0.0f64;
    for (u, v, dx, dy) in warp(pts, p.angle, p.sx, p.sy) {
        let (ex, ey) = field.bilinear(p.x + u, p.y + v);
        acc += (dx * ex + dy * ey).abs();
    }
    (acc / pts.len() as f64).clamp(0.0, 1.0)
}

/// Score of a template pose in an image, with bilinear sampling of the
/// gradient directions at full resolution.
pub fn score_pose(image: &ImageF32, tmpl: &ShapeTemplate, tx: f64, ty: f64, angle: f64) -> Result<f64, MatchError> {
    score_match(image, tmpl, &Match2D { tx, ty, angle, scale_x: 1.0, scale_y: 1.0, score: 0.0 })
}

/// Like [`score_pose`] for a full match pose including its axis scales.
pub fn score_match(image: &ImageF32, tmpl: &ShapeTemplate, m: &Match2D) -> Result<f64, MatchError> {
    let grad = gradient_map(&image.gaussian_blur(tmpl.params.blur_sigma), tmpl.params.contrast_threshold)?;
    let pose = Pose { x: m.tx, y: m.ty, angle: m.angle, sx: m.scale_x, sy: m.scale_y, score: 0.0 };
    Ok(score_bilinear(&grad.directions(), tmpl.points(), &pose))
}

/// Score of the template under a general affine map `p ↦ A·p + t` given
/// as the top two rows `[[a, b, tx], [c, d, ty]]`.
pub fn score_affine(image: &ImageF32, tmpl: &ShapeTemplate, affine: [[f64; 3]; 2]) -> Result<f64, MatchError> {
    let [[a, b, tx], [c, d, ty]] = affine;
    let det = a * d - b * c;
    if !(det.abs() > 1e-12) {
        return Err(MatchError::InvalidParameters("singular affine map".into()));
    }
    let field = gradient_map(&image.gaussian_blur(tmpl.params.blur_sigma), tmpl.params.contrast_threshold)?.directions();
    let mut acc = 0.0;
    for p in tmpl.points() {
        // Normals map with the inverse transpose.
        let (nx, ny) = ((d * p.dx - c * p.dy) / det, (-b * p.dx + a * p.dy) / det);
        let n = nx.hypot(ny);
        let (ex, ey) = field.bilinear(a * p.u + b * p.v + tx, c * p.u + d * p.v + ty);
        acc += (nx / n * ex + ny / n * ey).abs();
    }
    Ok((acc / tmpl.points().len() as f64).clamp(0.0, 1.0))
}

fn level_scale(k: usize) -> f64 {
    (1u64 << k) as f64
}

/// Level-0 buffer coordinate of a level-`k` pixel coordinate.
fn to_base(x: f64, k: usize) -> f64 {
    let s = level_scale(k);
    s * x + (s - 1.0) / 2.0
}

fn from_base(x: f64, k: usize) -> f64 {
    let s = level_scale(k);
    (x - (s - 1.0) / 2.0) / s
}

fn valid_range(r: (f64, f64)) -> bool {
    r.0 > 0.0 && r.0 <= r.1
}

pub fn match_template(image: &ImageF32, tmpl: &ShapeTemplate, params: &MatchParams) -> Result<Vec<Match2D>, MatchError> {
    if !(params.min_score > 0.0 && params.min_score <= 1.0) {
        return Err(MatchError::InvalidParameters(format!("min_score {} outside (0, 1]", params.min_score)));
    }
    if !(params.angle_step > 0.0) || !(params.angle_range.0 <= params.angle_range.1) {
        return Err(MatchError::InvalidParameters("angle range/step".into()));
    }
    if !valid_range(params.scale_x_range) || !valid_range(params.scale_y_range) || !(params.scale_step > 0.0) {
        return Err(MatchError::InvalidParameters("scale range/step".into()));
    }
    if params.max_matches == 0 {
        return Ok(Vec::new());
    }
    let top = (0..tmpl.pyramid_levels.len()).rev().find(|&k| tmpl.pyramid_levels[k].len() >= COARSE_MIN_POINTS).unwrap_or(0);
    let levels = build_levels(image, tmpl, top + 1)?;
    let top = top.min(levels.len() - 1);
    let candidates = coarse_search(&levels[top], &tmpl.pyramid_levels[top], top, params);

    let keep = (2 * params.max_matches).max(4);
    let mut poses = candidates;
    let mut steps = (params.angle_step, params.scale_step);
    for k in (0..top).rev() {
        steps = (steps.0 * 0.5, steps.1 * 0.5);
        poses = poses
            .into_iter()
            .map(|mut p| {
                p.x = from_base(to_base(p.x, k + 1), k);
                p.y = from_base(to_base(p.y, k + 1), k);
                hill_climb(&levels[k].field, &tmpl.pyramid_levels[k], p, steps, k == 0, params)
            })
            .filter(|p| p.score >= params.min_score * params.coarse_factor)
            .collect();
        poses = suppress(poses, tmpl.radius() / level_scale(k), keep);
    }
    if top == 0 {
        steps = (steps.0 * 0.5, steps.1 * 0.5);
        poses = poses.into_iter().map(|p| hill_climb(&levels[0].field, tmpl.points(), p, steps, true, params)).collect();
    }
    let refined: Vec<Pose> = poses
        .into_iter()
        .map(|p| subpixel(&levels[0].field, tmpl.points(), p, steps, params))
        .filter(|p| p.score >= params.min_score)
        .collect();
    Ok(suppress(refined, tmpl.radius(), params.max_matches)
        .into_iter()
        .map(|p| Match2D { tx: p.x, ty: p.y, angle: p.angle, scale_x: p.sx, scale_y: p.sy, score: p.score })
        .collect())
}

/// Best-first selection dropping poses closer than `radius` to a kept one.
fn suppress(mut poses: Vec<Pose>, radius: f64, limit: usize) -> Vec<Pose> {
    poses.sort_by(cmp_poses);
    let mut out: Vec<Pose> = Vec::new();
    for p in poses {
        if out.len() == limit {
            break;
        }
        if out.iter().all(|q| (q.x - p.x).hypot(q.y - p.y) >= radius) {
            out.push(p);
        }
    }
    out
}

fn angle_samples(params: &MatchParams) -> Vec<f64> {
    let (lo, hi) = params.angle_range;
    let n = ((hi - lo) / params.angle_step).floor() as usize;
    let full_turn = hi - lo >= 2.0 * std::f64::consts::PI - 1e-12;
    let mut out: Vec<f64> = (0..=n).map(|i| lo + i as f64 * params.angle_step).collect();
    if full_turn && out.len() > 1 && (out[out.len() - 1] - lo - 2.0 * std::f64::consts::PI).abs() < 1e-9 {
        out.pop();
    }
    out
}

/// Evenly spaced scales covering the range, no coarser than `step`.
fn scale_samples((lo, hi): (f64, f64), step: f64) -> Vec<f64> {
    if hi - lo < 1e-12 {
        return vec![lo];
    }
    let n = ((hi - lo) / step).ceil() as usize;
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn window_at_level(params: &MatchParams, k: usize, w: usize, h: usize) -> (i64, i64, i64, i64) {
    match params.search_window {
        Some((x0, y0, x1, y1)) => (
            from_base(x0, k).floor().max(0.0) as i64,
            from_base(y0, k).floor().max(0.0) as i64,
            (from_base(x1, k).ceil() as i64).min(w as i64 - 1),
            (from_base(y1, k).ceil() as i64).min(h as i64 - 1),
        ),
        None => (0, 0, w as i64 - 1, h as i64 - 1),
    }
}

/// Exhaustive search over integer positions, sampled angles and scales at
/// the coarsest level, keeping local maxima over all five dimensions.
fn coarse_search(level: &Level, pts: &[ModelPoint], k: usize, params: &MatchParams) -> Vec<Pose> {
    let field = &level.field;
    let (w, h) = (field.width, field.height);
    let n = pts.len() as f64;
    let threshold = params.min_score * params.coarse_factor;
    let (x0, y0, x1, y1) = window_at_level(params, k, w, h);
    if x1 < x0 || y1 < y0 {
        return Vec::new();
    }
    let angles = angle_samples(params);
    let sxs = scale_samples(params.scale_x_range, params.scale_step);
    let sys = scale_samples(params.scale_y_range, params.scale_step);
    let wraps = params.angle_range.1 - params.angle_range.0 >= 2.0 * std::f64::consts::PI - 1e-12;
    // Dimensions in storage order: angle, scale x, scale y, row, column.
    let dims = [angles.len() as i64, sxs.len() as i64, sys.len() as i64, y1 - y0 + 1, x1 - x0 + 1];
    let total: i64 = dims.iter().product();
    let flat = |c: [i64; 5]| c.iter().zip(&dims).fold(0i64, |acc, (v, d)| acc * d + v) as usize;
    let mut scores = vec![0f32; total as usize];

    for (ai, &angle) in angles.iter().enumerate() {
        for (xi, &sx) in sxs.iter().enumerate() {
            for (yi, &sy) in sys.iter().enumerate() {
                let mut warped: Vec<(i64, i64, f32, f32)> = warp(pts, angle, sx, sy).map(|(u, v, dx, dy)| (u.round() as i64, v.round() as i64, dx as f32, dy as f32)).collect();
                interleave(&mut warped);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let mut acc = 0f32;
                        let mut alive = true;
                        for (j, &(du, dv, dx, dy)) in warped.iter().enumerate() {
                            let (xx, yy) = (x + du, y + dv);
                            if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                                let i = yy as usize * w + xx as usize;
                                acc += (dx * field.ex[i] + dy * field.ey[i]).abs();
                            }
                            let seen = j as f64 + 1.0;
                            if (acc as f64) + (n - seen) < threshold * n || (seen >= GREEDY_MIN_POINTS && (acc as f64) < GREEDINESS * threshold * seen) {
                                alive = false;
                                break;
                            }
                        }
                        if alive {
                            scores[flat([ai as i64, xi as i64, yi as i64, y - y0, x - x0])] = (acc as f64 / n) as f32;
                        }
                    }
                }
            }
        }
    }

    let at = |mut c: [i64; 5]| -> Option<f32> {
        if wraps {
            c[0] = c[0].rem_euclid(dims[0]);
        }
        if c.iter().zip(&dims).any(|(v, d)| *v < 0 || v >= d) {
            return None;
        }
        Some(scores[flat(c)])
    };
    let offsets: Vec<[i64; 5]> = (0..243)
        .map(|m: i64| [m / 81 % 3 - 1, m / 27 % 3 - 1, m / 9 % 3 - 1, m / 3 % 3 - 1, m % 3 - 1])
        .filter(|o| o.iter().any(|v| *v != 0))
        .collect();
    let mut cands = Vec::new();
    for i in 0..total {
        let sc = scores[i as usize];
        if (sc as f64) < threshold || sc == 0.0 {
            continue;
        }
        let mut c = [0i64; 5];
        let mut rest = i;
        for d in (0..5).rev() {
            c[d] = rest % dims[d];
            rest /= dims[d];
        }
        // Ties resolve toward the earlier cell in storage order.
        let is_max = offsets.iter().all(|o| {
            let nb = [c[0] + o[0], c[1] + o[1], c[2] + o[2], c[3] + o[3], c[4] + o[4]];
            match at(nb) {
                Some(other) => other < sc || (other == sc && *o > [0; 5]),
                None => true,
            }
        });
        if is_max {
            cands.push(Pose {
                x: (c[4] + x0) as f64,
                y: (c[3] + y0) as f64,
                angle: angles[c[0] as usize],
                sx: sxs[c[1] as usize],
                sy: sys[c[2] as usize],
                score: sc as f64,
            });
        }
    }
    cands.sort_by(cmp_poses);
    cands.truncate((4 * params.max_matches).max(16));
    cands
}

/// Reorders points so that any prefix is spread over the whole template.
fn interleave<T: Copy>(v: &mut [T]) {
    let n = v.len();
    let stride = (1..n).rev().find(|s| *s * 5 <= n * 3 && gcd(*s, n) == 1).unwrap_or(1);
    let src = v.to_vec();
    for (i, slot) in v.iter_mut().enumerate() {
        *slot = src[i * stride % n];
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn clamp_angle(a: f64, params: &MatchParams) -> f64 {
    let (lo, hi) = params.angle_range;
    if hi - lo >= 2.0 * std::f64::consts::PI - 1e-12 {
        a
    } else {
        a.clamp(lo, hi)
    }
}

/// Single-coordinate moves: the 8 grid neighbours, then ± one step in angle
/// and in each free scale.
fn moves(p: &Pose, (astep, sstep): (f64, f64), params: &MatchParams) -> Vec<Pose> {
    let mut out = Vec::with_capacity(14);
    for (dx, dy) in [(-1.0, -1.0), (0.0, -1.0), (1.0, -1.0), (-1.0, 0.0), (1.0, 0.0), (-1.0, 1.0), (0.0, 1.0), (1.0, 1.0)] {
        out.push(Pose { x: p.x + dx, y: p.y + dy, ..*p });
    }
    for d in [-1.0, 1.0] {
        out.push(Pose { angle: clamp_angle(p.angle + d * astep, params), ..*p });
        if params.scale_x_range.1 > params.scale_x_range.0 {
            out.push(Pose { sx: (p.sx + d * sstep).clamp(params.scale_x_range.0, params.scale_x_range.1), ..*p });
        }
        if params.scale_y_range.1 > params.scale_y_range.0 {
            out.push(Pose { sy: (p.sy + d * sstep).clamp(params.scale_y_range.0, params.scale_y_range.1), ..*p });
        }
    }
    out
}

/// Greedy ascent on the integer grid of the level and the angle/scale lattice.
fn hill_climb(field: &DirectionField, pts: &[ModelPoint], start: Pose, steps: (f64, f64), bilinear: bool, params: &MatchParams) -> Pose {
    let score = |p: &Pose| if bilinear { score_bilinear(field, pts, p) } else { score_nearest(field, pts, p) };
    let mut cur = Pose { x: start.x.round(), y: start.y.round(), ..start };
    cur.score = score(&cur);
    for _ in 0..40 {
        let mut best = cur;
        for mut m in moves(&cur, steps, params) {
            m.score = score(&m);
            if m.score > best.score {
                best = m;
            }
        }
        if best.score <= cur.score {
            break;
        }
        cur = best;
    }
    cur
}

/// Vertex offset of the parabola through `(−1, a), (0, b), (1, c)`.
fn parabola_peak(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

fn subpixel(field: &DirectionField, pts: &[ModelPoint], p: Pose, (astep, sstep): (f64, f64), params: &MatchParams) -> Pose {
    let s = |q: Pose| score_bilinear(field, pts, &q);
    let b = s(p);
    let peak = |lo: Pose, hi: Pose| parabola_peak(s(lo), b, s(hi));
    let ox = peak(Pose { x: p.x - 1.0, ..p }, Pose { x: p.x + 1.0, ..p });
    let oy = peak(Pose { y: p.y - 1.0, ..p }, Pose { y: p.y + 1.0, ..p });
    let oa = peak(Pose { angle: p.angle - astep, ..p }, Pose { angle: p.angle + astep, ..p });
    let free = |r: (f64, f64)| r.1 > r.0;
    let osx = if free(params.scale_x_range) { peak(Pose { sx: p.sx - sstep, ..p }, Pose { sx: p.sx + sstep, ..p }) } else { 0.0 };
    let osy = if free(params.scale_y_range) { peak(Pose { sy: p.sy - sstep, ..p }, Pose { sy: p.sy + sstep, ..p }) } else { 0.0 };
    let mut candidate = Pose {
        x: p.x + ox,
        y: p.y + oy,
        angle: clamp_angle(p.angle + oa * astep, params),
        sx: (p.sx + osx * sstep).clamp(params.scale_x_range.0, params.scale_x_range.1),
        sy: (p.sy + osy * sstep).clamp(params.scale_y_range.0, params.scale_y_range.1),
        score: 0.0,
    };
    candidate.score = s(candidate);
    if candidate.score >= b {
        candidate
    } else {
        Pose { score: b, ..p }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disk_image(w: usize, h: usize, shapes: &[(f64, f64, f64)]) -> ImageF32 {
        let mut img = ImageF32::new(w, h, 200.0);
        for y in 0..h {
            for x in 0..w {
                if shapes.iter().any(|&(cx, cy, r)| (x as f64 - cx).hypot(y as f64 - cy) <= r) {
                    img.data[y * w + x] = 30.0;
                }
            }
        }
        img
    }

    /// An asymmetric arrangement of disks and a bar.
    fn pattern(w: usize, h: usize, cx: f64, cy: f64, angle: f64) -> ImageF32 {
        let (s, c) = angle.sin_cos();
        let place = |u: f64, v: f64| (cx + c * u - s * v, cy + s * u + c * v);
        let mut shapes = Vec::new();
        for &(u, v, r) in &[(0.0, 0.0, 6.0), (-20.0, -8.0, 4.0), (18.0, -12.0, 5.0), (8.0, 18.0, 3.0)] {
            let (x, y) = place(u, v);
            shapes.push((x, y, r));
        }
        for t in 0..30 {
            let (x, y) = place(-25.0 + t as f64, 25.0);
            shapes.push((x, y, 2.0));
        }
        disk_image(w, h, &shapes)
    }

    #[test]
    fn uniform_image_has_empty_mask() {
        let g = gradient_map(&ImageF32::new(10, 10, 77.0), 1.0).unwrap();
        assert_eq!(g.masked_count(), 0);
    }

    #[test]
    fn step_edge_matches_central_difference() {
        let mut img = ImageF32::new(9, 7, 10.0);
        for y in 0..7 {
            for x in 5..9 {
                img.data[y * 9 + x] = 90.0;
            }
        }
        let g = gradient_map(&img, 1.0).unwrap();
        for y in 1..6 {
            for x in 1..8 {
                let cd = (img.get(x + 1, y) - img.get(x - 1, y)) as f64 / 2.0;
                assert!((g.gx[y * 9 + x] as f64 - cd).abs() < 1e-9);
                assert_eq!(g.gy[y * 9 + x], 0.0);
            }
        }
        assert!(g.mask[3 * 9 + 4] && g.mask[3 * 9 + 5] && !g.mask[3 * 9 + 2]);
    }

    #[test]
    fn tiny_image_rejected() {
        assert_eq!(gradient_map(&ImageF32::new(2, 2, 0.0), 1.0), Err(MatchError::ImageTooSmall(2, 2)));
    }

    #[test]
    fn blank_image_has_no_structure() {
        let img = ImageF32::new(100, 100, 50.0);
        let r = create_template(&img, Roi { cx: 50.0, cy: 50.0, radius: 30.0 }, TemplateParams::default());
        assert_eq!(r.unwrap_err(), MatchError::InsufficientStructure(0));
        let r = create_template(&img, Roi { cx: 10.0, cy: 50.0, radius: 30.0 }, TemplateParams::default());
        assert_eq!(r.unwrap_err(), MatchError::RoiOutsideImage);
    }

    #[test]
    fn pyramid_counts_follow_quarter_rule() {
        let img = pattern(200, 160, 100.0, 80.0, 0.0);
        let t = create_template(&img, Roi { cx: 100.0, cy: 80.0, radius: 45.0 }, TemplateParams::default()).unwrap();
        let base = t.points().len() as f64;
        assert!(t.pyramid_levels.len() >= 2);
        for (k, lvl) in t.pyramid_levels.iter().enumerate() {
            let expect = base / 4f64.powi(k as i32);
            assert!((lvl.len() as f64 - expect).abs() <= 0.5 * expect, "level {k}: {} vs {expect}", lvl.len());
            assert!(lvl.len() >= MIN_TEMPLATE_POINTS);
            assert!(lvl.iter().all(|p| (p.dx.hypot(p.dy) - 1.0).abs() < 1e-6));
        }
        assert!(base / 4f64.powi(t.pyramid_levels.len() as i32) < MIN_TEMPLATE_POINTS as f64);
    }

    #[test]
    fn self_match_full_turn() {
        let img = pattern(200, 160, 100.0, 80.0, 0.0);
        let t = create_template(&img, Roi { cx: 100.0, cy: 80.0, radius: 45.0 }, TemplateParams::default()).unwrap();
        let m = match_template(&img, &t, &MatchParams::default()).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m[0].score >= 0.99, "score {}", m[0].score);
        assert!((m[0].tx - 100.0).abs() < 0.5 && (m[0].ty - 80.0).abs() < 0.5);
        assert!(m[0].angle.abs() < 0.5f64.to_radians());
    }

    #[test]
    fn rotated_target_recovers_angle() {
        let t = create_template(&pattern(200, 160, 100.0, 80.0, 0.0), Roi { cx: 100.0, cy: 80.0, radius: 45.0 }, TemplateParams::default()).unwrap();
        let img = pattern(240, 200, 130.0, 95.0, 30f64.to_radians());
        let params = MatchParams::default();
        let m = match_template(&img, &t, &params).unwrap();
        assert!((m[0].angle - 30f64.to_radians()).abs() <= params.angle_step / 2.0, "angle {}", m[0].angle.to_degrees());
        assert!((m[0].tx - 130.0).hypot(m[0].ty - 95.0) < 1.0);
    }

    /// The pattern seen through `diag(sx, sy)` after the rotation.
    fn stretched_pattern(w: usize, h: usize, cx: f64, cy: f64, angle: f64, sx: f64, sy: f64) -> ImageF32 {
        let mut disks = vec![(0.0, 0.0, 6.0), (-20.0, -8.0, 4.0), (18.0, -12.0, 5.0), (8.0, 18.0, 3.0)];
        disks.extend((0..30).map(|t| (-25.0 + t as f64, 25.0, 2.0)));
        let (s, c) = angle.sin_cos();
        let mut img = ImageF32::new(w, h, 200.0);
        for y in 0..h {
            for x in 0..w {
                let (a, b) = ((x as f64 - cx) / sx, (y as f64 - cy) / sy);
                let (u, v) = (c * a + s * b, -s * a + c * b);
                if disks.iter().any(|&(du, dv, r)| (u - du).hypot(v - dv) <= r) {
                    img.data[y * w + x] = 30.0;
                }
            }
        }
        img
    }

    #[test]
    fn anisotropic_scale_recovered() {
        let t = create_template(&pattern(200, 160, 100.0, 80.0, 0.0), Roi { cx: 100.0, cy: 80.0, radius: 45.0 }, TemplateParams::default()).unwrap();
        let img = stretched_pattern(240, 200, 118.0, 97.0, 10f64.to_radians(), 0.8, 0.95);
        let params = MatchParams {
            angle_range: (-20f64.to_radians(), 20f64.to_radians()),
            scale_x_range: (0.6, 1.1),
            scale_y_range: (0.85, 1.1),
            scale_step: 0.1,
            ..MatchParams::default()
        };
        let m = match_template(&img, &t, &params).unwrap();
        assert!(m[0].score > 0.9, "score {}", m[0].score);
        assert!((m[0].tx - 118.0).hypot(m[0].ty - 97.0) < 0.5);
        assert!((m[0].scale_x - 0.8).abs() < 0.02 && (m[0].scale_y - 0.95).abs() < 0.02, "{:?}", m[0]);
        assert!((m[0].angle - 10f64.to_radians()).abs() < 1f64.to_radians());
        let rigid = match_template(&img, &t, &MatchParams { min_score: 0.3, ..MatchParams::default() }).unwrap();
        assert!(rigid.first().map_or(0.0, |r| r.score) < m[0].score - 0.1);
    }

    #[test]
    fn noise_image_gives_no_match() {
        let t = create_template(&pattern(200, 160, 100.0, 80.0, 0.0), Roi { cx: 100.0, cy: 80.0, radius: 45.0 }, TemplateParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = ImageF32::new(200, 160, 0.0);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..255.0));
        let params = MatchParams { min_score: 0.7, max_matches: 5, ..MatchParams::default() };
        assert!(match_template(&img, &t, &params).unwrap().is_empty());
    }

    #[test]
    fn polarity_invariance() {
        let img = pattern(200, 160, 100.0, 80.0, 0.0);
        let t = create_template(&img, Roi { cx: 100.0, cy: 80.0, radius: 45.0 }, TemplateParams { contrast_threshold: 1e-3, blur_sigma: 1.5 }).unwrap();
        let mut inverted = img.clone();
        inverted.data.iter_mut().for_each(|v| *v = 255.0 - *v);
        for (x, y, a) in [(100.0, 80.0, 0.0), (101.3, 79.6, 0.05)] {
            let s0 = score_pose(&img, &t, x, y, a).unwrap();
            assert!((score_pose(&inverted, &t, x, y, a).unwrap() - s0).abs() < 1e-5);
        }
    }

    #[test]
    fn gain_invariance() {
        // Halving is exact in floating point, so with a zero threshold the
        // mask and directions are unchanged.
        let img = pattern(200, 160, 100.0, 80.0, 0.0);
        let t = create_template(&img, Roi { cx: 100.0, cy: 80.0, radius: 45.0 }, TemplateParams { contrast_threshold: 0.0, blur_sigma: 1.5 }).unwrap();
        let mut dim = img.clone();
        dim.data.iter_mut().for_each(|v| *v *= 0.5);
        for (x, y, a) in [(100.0, 80.0, 0.0), (101.3, 79.6, 0.05)] {
            let s0 = score_pose(&img, &t, x, y, a).unwrap();
            assert!((score_pose(&dim, &t, x, y, a).unwrap() - s0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_results() {
        let t = create_template(&pattern(200, 160, 100.0, 80.0, 0.0), Roi { cx: 100.0, cy: 80.0, radius: 45.0 }, TemplateParams::default()).unwrap();
        let img = pattern(300, 200, 90.0, 100.0, 0.3);
        let params = MatchParams { max_matches: 3, min_score: 0.5, ..MatchParams::default() };
        assert_eq!(match_template(&img, &t, &params).unwrap(), match_template(&img, &t, &params).unwrap());
    }

    #[test]
    fn keypoints_follow_pose() {
        let mut t = create_template(&pattern(200, 160, 100.0, 80.0, 0.0), Roi { cx: 100.0, cy: 80.0, radius: 45.0 }, TemplateParams::default()).unwrap();
        t.keypoints.push(Keypoint { label: "a".into(), u: 10.0, v: 0.0 });
        let placed = t.place_keypoints(&Match2D { tx: 5.0, ty: 6.0, angle: std::f64::consts::FRAC_PI_2, scale_x: 1.0, scale_y: 1.0, score: 1.0 });
        assert!((placed[0].1 - 5.0).abs() < 1e-12 && (placed[0].2 - 16.0).abs() < 1e-12);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<ShapeTemplate>(&json).unwrap(), t);
    }
}
