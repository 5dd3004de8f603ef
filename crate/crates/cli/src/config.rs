//! Run configuration: an optional JSON file overridden by command-line flags.

use evplug_core::pipeline::NoiseProfile;
use evplug_core::scene::PortKind;
use evplug_core::triangulation::TriangulationMethod;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}, line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PortType {
    Type1,
    Type2,
}

impl From<PortType> for PortKind {
    fn from(p: PortType) -> Self {
        match p {
            PortType::Type1 => PortKind::Type1,
            PortType::Type2 => PortKind::Type2,
        }
    }
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub port_type: Option<PortType>,
    pub port_angles_deg: Option<Vec<f64>>,
    pub runs: Option<usize>,
    pub noise: Option<String>,
    pub calibration_poses: Option<usize>,
    /// Calibration written by `evplug calibrate`, reused by `run-experiment`.
    /// Relative paths resolve against the config file's directory.
    pub calibration_file: Option<PathBuf>,
    pub force_threshold: Option<f64>,
    pub method: Option<TriangulationMethod>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg: ConfigFile = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.into(),
            line: e.line(),
            column: e.column(),
            message: strip_position(&e.to_string()),
        })?;
        if let Some(f) = &cfg.calibration_file {
            if f.is_relative() {
                cfg.calibration_file = Some(path.parent().unwrap_or(Path::new(".")).join(f));
            }
        }
        Ok(cfg)
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Values from the command line; `None` / empty defers to the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub port_type: Option<PortType>,
    pub port_angles_deg: Vec<f64>,
    pub runs: Option<usize>,
    pub noise: Option<String>,
    pub poses: Option<usize>,
}

/// Fully resolved settings shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub port_type: PortType,
    pub port_angles_deg: Vec<f64>,
    pub runs: usize,
    pub noise: NoiseProfile,
    pub calibration_poses: usize,
    #[serde(skip)]
    pub calibration_file: Option<PathBuf>,
    pub force_threshold: f64,
    pub method: TriangulationMethod,
}

pub const DEFAULT_ANGLES_DEG: [f64; 2] = [10.0, 30.0];
pub const DEFAULT_RUNS: usize = 5;
pub const DEFAULT_POSES: usize = 26;

impl Settings {
    pub fn resolve(file: Option<&Path>, cli: &Overrides) -> Result<Self, ConfigError> {
        let cfg = match file {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let origin = file.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<command line>"));
        let invalid = |message: String| ConfigError::Invalid { path: origin.clone(), message };
        let noise_name = cli.noise.clone().or(cfg.noise).unwrap_or_else(|| "lab".into());
        let noise = NoiseProfile::preset(&noise_name).map_err(|e| invalid(e.to_string()))?;
        let port_angles_deg = if !cli.port_angles_deg.is_empty() {
            cli.port_angles_deg.clone()
        } else {
            cfg.port_angles_deg.unwrap_or_else(|| DEFAULT_ANGLES_DEG.to_vec())
        };
        if port_angles_deg.is_empty() || port_angles_deg.iter().any(|a| !a.is_finite() || a.abs() >= 90.0) {
            return Err(invalid(format!("port angles must be finite and within ±90°, got {port_angles_deg:?}")));
        }
        let force_threshold = cfg.force_threshold.unwrap_or(evplug_core::scene::DEFAULT_FORCE_THRESHOLD);
        if !(force_threshold > 0.0) {
            return Err(invalid(format!("force_threshold must be positive, got {force_threshold}")));
        }
        Ok(Settings {
            seed: cli.seed.or(cfg.seed).unwrap_or(0),
            port_type: cli.port_type.or(cfg.port_type).unwrap_or(PortType::Type2),
            port_angles_deg,
            runs: cli.runs.or(cfg.runs).unwrap_or(DEFAULT_RUNS),
            noise,
            calibration_poses: cli.poses.or(cfg.calibration_poses).unwrap_or(DEFAULT_POSES),
            calibration_file: cfg.calibration_file,
            force_threshold,
            method: cfg.method.unwrap_or(TriangulationMethod::Rays),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn flags_override_file() {
        let f = write(r#"{"seed": 4, "runs": 2, "port_angles_deg": [15], "noise": "none"}"#);
        let s = Settings::resolve(Some(f.path()), &Overrides { seed: Some(9), ..Overrides::default() }).unwrap();
        assert_eq!((s.seed, s.runs, s.port_angles_deg.clone(), s.noise.name.as_str()), (9, 2, vec![15.0], "none"));
        let d = Settings::resolve(None, &Overrides::default()).unwrap();
        assert_eq!((d.seed, d.runs, d.port_type, d.calibration_poses), (0, 5, PortType::Type2, 26));
    }

    #[test]
    fn parse_error_reports_line() {
        let f = write("{\n  \"seed\": 1,\n  \"runs\": x\n}");
        match ConfigFile::load(f.path()) {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = write(r#"{"colour": 1}"#);
        assert!(matches!(ConfigFile::load(f.path()), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn bad_values_rejected() {
        let f = write(r#"{"noise": "fog"}"#);
        assert!(matches!(Settings::resolve(Some(f.path()), &Overrides::default()), Err(ConfigError::Invalid { .. })));
        let o = Overrides { port_angles_deg: vec![95.0], ..Overrides::default() };
        assert!(Settings::resolve(None, &o).is_err());
    }
}
