use crate::geometry::Vec3;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use super::SceneError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PortKind {
    Type1,
    Type2,
}

impl PortKind {
    pub fn pin_count(self) -> usize {
        match self {
            PortKind::Type1 => 5,
            PortKind::Type2 => 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pin {
    pub label: String,
    pub center: Vec3,
    pub radius: f64,
}

/// Outline stroke in the port plane (coordinates in meters, port frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Circle { center: [f64; 2], radius: f64 },
    Line { from: [f64; 2], to: [f64; 2] },
}

impl Primitive {
    /// Distance from an in-plane point to the stroke's center line.
    pub fn distance(&self, u: f64, v: f64) -> f64 {
        match self {
            Primitive::Circle { center, radius } => ((u - center[0]).hypot(v - center[1]) - radius).abs(),
            Primitive::Line { from, to } => {
                let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
                let len2 = dx * dx + dy * dy;
                let s = if len2 > 0.0 { (((u - from[0]) * dx + (v - from[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                (u - from[0] - s * dx).hypot(v - from[1] - s * dy)
            }
        }
    }

    /// Points sampled along the stroke, used for visibility checks.
    pub fn sample_points(&self, n: usize) -> Vec<[f64; 2]> {
        match self {
            Primitive::Circle { center, radius } => (0..n)
                .map(|i| {
                    let a = i as f64 / n as f64 * std::f64::consts::TAU;
                    [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
                })
                .collect(),
            Primitive::Line { from, to } => (0..n)
                .map(|i| {
                    let s = i as f64 / (n - 1).max(1) as f64;
                    [from[0] + s * (to[0] - from[0]), from[1] + s * (to[1] - from[1])]
                })
                .collect(),
        }
    }

    fn extent(&self) -> f64 {
        match self {
            Primitive::Circle { center, radius } => center[0].hypot(center[1]) + radius,
            Primitive::Line { from, to } => from[0].hypot(from[1]).max(to[0].hypot(to[1])),
        }
    }
}

/// Charging port (or plug) face geometry in its own frame: pins lie in the
/// z = 0 plane, +z points out of the face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortModel {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub kind: PortKind,
    pub pins: Vec<Pin>,
    pub outline: Vec<Primitive>,
    pub stroke_width: f64,
    pub slot_direction: Vec3,
    pub insertion_depth: f64,
}

pub const PORT_ASSET_VERSION: u32 = 1;

impl PortModel {
    pub fn validate(&self) -> Result<(), SceneError> {
        let invalid = |m: String| Err(SceneError::InvalidPortModel(m));
        if self.version != PORT_ASSET_VERSION {
            return invalid(format!("unsupported asset version {}", self.version));
        }
        if self.pins.len() != self.kind.pin_count() {
            return invalid(format!("{:?} requires {} pins, found {}", self.kind, self.kind.pin_count(), self.pins.len()));
        }
        let mut labels = HashSet::new();
        for pin in &self.pins {
            if !labels.insert(pin.label.as_str()) {
                return invalid(format!("duplicate pin label {}", pin.label));
            }
            if pin.center.z.abs() > 1e-12 {
                return invalid(format!("pin {} is not in the z = 0 plane", pin.label));
            }
            if !(pin.radius > 0.0) {
                return invalid(format!("pin {} has non-positive radius", pin.label));
            }
        }
        if (self.slot_direction.norm() - 1.0).abs() > 1e-9 || self.slot_direction.z.abs() > 1e-9 {
            return invalid("slot direction must be a unit vector in the port plane".into());
        }
        if !(self.stroke_width > 0.0 && self.insertion_depth > 0.0) {
            return invalid("stroke width and insertion depth must be positive".into());
        }
        Ok(())
    }

    pub fn pin(&self, label: &str) -> Option<&Pin> {
        self.pins.iter().find(|p| p.label == label)
    }

    pub fn labels(&self) -> Vec<String> {
        self.pins.iter().map(|p| p.label.clone()).collect()
    }

    /// Radius of a disk (port frame, centered at the origin) containing every feature.
    pub fn extent(&self) -> f64 {
        let pins = self.pins.iter().map(|p| p.center.norm() + p.radius);
        let outline = self.outline.iter().map(|o| o.extent() + self.stroke_width / 2.0);
        pins.chain(outline).fold(0.0, f64::max)
    }

    /// Coverage test for an in-plane point: inside a pin or on an outline stroke.
    pub fn is_dark(&self, u: f64, v: f64) -> bool {
        let half = self.stroke_width / 2.0;
        self.pins.iter().any(|p| (u - p.center.x).hypot(v - p.center.y) <= p.radius)
            || self.outline.iter().any(|o| o.distance(u, v) <= half)
    }

    pub fn centroid(&self) -> Vec3 {
        self.pins.iter().map(|p| p.center).sum::<Vec3>() / self.pins.len() as f64
    }
}
