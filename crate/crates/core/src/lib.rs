//! Hardware-free robotic EV charging pipeline.
//!
//! A verged stereo pair locates a charging port with gradient-orientation
//! template matching, triangulates its reference pins and fits a 6-DOF pose.
//! The camera-to-robot and flange-to-plug transforms come from a marker-less
//! AX = YB calibration on the plug's own pins. A staged plug-in motion is then
//! planned, executed under force monitoring and undone by waypoint replay.

pub mod assets;
pub mod geometry;
pub mod image;
pub mod robot;
pub mod scene;
pub mod triangulation;
pub mod pose;
pub mod calibration;
pub mod matching;
pub mod planner;
pub mod json;
pub mod pipeline;
