//! Ground-truth world: port geometry, verged stereo rendering and the
//! insertion contact model.

mod contact;
mod port;
mod render;
mod rig;

pub use contact::{
    categorize, contact_force, contact_geometry, simulate_insertion, ContactGeometry, ContactModel, InsertionCategory, InsertionOutcome,
    InsertionTolerances, DEFAULT_FORCE_THRESHOLD, DEFAULT_SEATING_FORCE, DEFAULT_STIFFNESS,
};
pub use port::{Pin, PortKind, PortModel, Primitive, PORT_ASSET_VERSION};
pub use render::{rasterize_coverage, render_views, SceneConfig, BACKGROUND_LEVEL, FEATURE_LEVEL, SUPERSAMPLE};
pub use rig::{project_to_stereo, PixelPair, StereoRig};

use crate::geometry::GeometryError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid port model: {0}")]
    InvalidPortModel(String),
    #[error("invalid stereo rig: {0}")]
    InvalidRig(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("no port feature projects inside the image")]
    PortOutOfView,
    #[error("insertion trajectory is empty")]
    EmptyTrajectory,
    #[error("plug axis never reaches the port face")]
    NoContact,
}
