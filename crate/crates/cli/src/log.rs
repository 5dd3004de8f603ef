//! JSON-lines run logs and the summaries derived from them.

use crate::config::PortType;
use evplug_core::json;
use evplug_core::pipeline::{NoiseProfile, RunRecord, Summary};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("cannot read log {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt log at byte offset {offset} (line {line}): {message}")]
    Corrupt { offset: usize, line: usize, message: String },
    #[error("log line {line} has schema version {found}; this build reads version {SCHEMA_VERSION}")]
    SchemaVersion { line: usize, found: u32 },
    #[error("log line {line} has neither a header nor a run entry")]
    EmptyEntry { line: usize },
}

/// Calibration in use for a batch, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEcho {
    /// `"generated"` or the file it was loaded from.
    pub source: String,
    pub mean_translation_error: f64,
    /// Ground-truth errors, known only for freshly simulated calibrations.
    pub base_cam_translation_error: Option<f64>,
    pub base_cam_rotation_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub port_type: PortType,
    pub port_angles_deg: Vec<f64>,
    pub runs_per_angle: usize,
    pub noise: NoiseProfile,
    pub seed: u64,
    pub calibration: CalibrationEcho,
}

/// One line of a run log: either the batch header or a run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<LogHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub header: Option<LogHeader>,
    pub runs: Vec<RunRecord>,
}

impl RunLog {
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut put = |line: &LogLine| -> std::io::Result<()> {
            let text = json::to_string(line).map_err(std::io::Error::other)?;
            writeln!(w, "{text}")
        };
        if let Some(h) = &self.header {
            put(&LogLine { schema_version: SCHEMA_VERSION, header: Some(h.clone()), run: None })?;
        }
        let mut runs = self.runs.clone();
        runs.sort_by_key(|r| r.run_index);
        for r in runs {
            put(&LogLine { schema_version: SCHEMA_VERSION, header: None, run: Some(r) })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, LogError> {
        let mut log = RunLog::default();
        let mut offset = 0;
        for (i, raw) in text.split_inclusive('\n').enumerate() {
            let line_no = i + 1;
            let content = raw.trim_end_matches(['\n', '\r']);
            if !content.trim().is_empty() {
                let line: LogLine = serde_json::from_str(content).map_err(|e| LogError::Corrupt {
                    offset: offset + content.lines().take(e.line().saturating_sub(1)).map(|l| l.len() + 1).sum::<usize>() + e.column().saturating_sub(1),
                    line: line_no,
                    message: e.to_string(),
                })?;
                if line.schema_version != SCHEMA_VERSION {
                    return Err(LogError::SchemaVersion { line: line_no, found: line.schema_version });
                }
                match (line.header, line.run) {
                    (Some(h), _) => log.header = Some(h),
                    (None, Some(r)) => log.runs.push(r),
                    (None, None) => return Err(LogError::EmptyEntry { line: line_no }),
                }
            }
            offset += raw.len();
        }
        Ok(log)
    }

    pub fn read(path: &Path) -> Result<Self, LogError> {
        let text = std::fs::read_to_string(path).map_err(|source| LogError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}

fn fmt_angle(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{a:.0}")
    } else {
        format!("{a}")
    }
}

/// Run-by-angle table with runs as rows and port angles as columns.
pub fn outcome_table(runs: &[RunRecord]) -> String {
    let mut angles: Vec<f64> = Vec::new();
    for r in runs {
        if !angles.contains(&r.port_angle_deg) {
            angles.push(r.port_angle_deg);
        }
    }
    let columns: Vec<Vec<&RunRecord>> = angles.iter().map(|a| runs.iter().filter(|r| r.port_angle_deg == *a).collect()).collect();
    let rows = columns.iter().map(Vec::len).max().unwrap_or(0);
    let mut header = vec!["Run".to_string()];
    header.extend(angles.iter().map(|a| format!("Charging Port Angle {}°", fmt_angle(*a))));
    let mut grid = vec![header];
    for i in 0..rows {
        let mut row = vec![(i + 1).to_string()];
        row.extend(columns.iter().map(|c| c.get(i).map_or(String::new(), |r| r.table_label.clone())));
        grid.push(row);
    }
    let widths: Vec<usize> = (0..grid[0].len()).map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (k, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if k == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        }
    }
    out
}

/// Human-readable summary: counts, success rate, calibration echo and the table.
pub fn summary_text(log: &RunLog) -> String {
    let s = Summary::of(&log.runs);
    let mut out = String::new();
    if s.runs == 0 {
        out.push_str("0 runs\n");
        return out;
    }
    let _ = writeln!(
        out,
        "{} runs: {} success, {} success with misalignment, {} failed (missed rotation), {} errors; success rate {:.0}%",
        s.runs,
        s.full,
        s.partial,
        s.failed,
        s.errors,
        100.0 * s.success_rate()
    );
    if let Some(h) = &log.header {
        let _ = writeln!(out, "noise preset {}, seed {}, port {:?}", h.noise.name, h.seed, h.port_type);
        let _ = write!(out, "calibration ({}): mean translation error {:.3} mm", h.calibration.source, 1e3 * h.calibration.mean_translation_error);
        if let Some(t) = h.calibration.base_cam_translation_error {
            let _ = write!(out, ", camera-to-base error {:.3} mm", 1e3 * t);
        }
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&outcome_table(&log.runs));
    out
}

/// CSV header; the column set and order are fixed.
pub const CSV_COLUMNS: [&str; 14] = [
    "run_index",
    "port_angle_deg",
    "category",
    "table_label",
    "residual_angle_deg",
    "max_force_n",
    "halted",
    "halt_time_s",
    "final_depth_m",
    "detection_score",
    "pose_translation_error_m",
    "pose_rotation_error_deg",
    "calibration_mean_translation_error_m",
    "error",
];

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn write_csv<W: Write>(log: &RunLog, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    let calib = log.header.as_ref().map(|h| h.calibration.mean_translation_error);
    for r in &log.runs {
        out.write_record([
            r.run_index.to_string(),
            num(r.port_angle_deg),
            r.category.map_or(String::new(), |c| format!("{c:?}")),
            r.table_label.clone(),
            opt(r.residual_angle_deg),
            num(r.max_force),
            r.halted.to_string(),
            opt(r.halt_time),
            num(r.final_depth),
            num(r.detection_score),
            opt(r.pose_translation_error),
            opt(r.pose_rotation_error_deg),
            opt(calib),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use evplug_core::scene::InsertionCategory;

    fn record(i: usize, angle: f64, cat: InsertionCategory) -> RunRecord {
        RunRecord {
            run_index: i,
            port_angle_deg: angle,
            category: Some(cat),
            table_label: cat.table_label().into(),
            residual_angle_deg: Some(0.1 * i as f64),
            max_force: 1.5,
            halted: cat == InsertionCategory::HaltedMissedRotation,
            halt_time: None,
            final_depth: 0.025,
            detection_score: 1.0,
            pose_translation_error: Some(1e-4),
            pose_rotation_error_deg: None,
            waypoints_reached: 4,
            samples: 100,
            unplug_plan_matches: true,
            unplug_return_error: Some(0.0),
            error: None,
        }
    }

    fn table_log() -> RunLog {
        let mut runs = Vec::new();
        for (k, angle) in [10.0, 30.0].into_iter().enumerate() {
            for i in 0..5 {
                let cat = if i == 2 && k == 1 { InsertionCategory::HaltedMissedRotation } else { InsertionCategory::FullInsertion };
                runs.push(record(k * 5 + i, angle, cat));
            }
        }
        RunLog { header: None, runs }
    }

    #[test]
    fn round_trip() {
        let log = table_log();
        let mut buf = Vec::new();
        log.write(&mut buf).unwrap();
        assert_eq!(RunLog::parse(std::str::from_utf8(&buf).unwrap()).unwrap(), log);
    }

    #[test]
    fn table_has_two_columns_five_rows() {
        let t = outcome_table(&table_log().runs);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[0].contains("Charging Port Angle 10°") && lines[0].contains("Charging Port Angle 30°"));
        assert!(lines[4].contains("Failed: Missed rotation"));
        assert_eq!(lines[2].matches('|').count(), 4);
    }

    #[test]
    fn empty_and_corrupt_logs() {
        let empty = RunLog::parse("").unwrap();
        assert_eq!(summary_text(&empty), "0 runs\n");
        let bad = "\n{\"schema_version\":1,\"run\":{\"run_index\":x}}\n";
        match RunLog::parse(bad) {
            Err(LogError::Corrupt { offset, line, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(&bad[offset..offset + 1], "x");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunLog::parse("{\"schema_version\":7}\n"), Err(LogError::SchemaVersion { found: 7, .. })));
        assert!(matches!(RunLog::parse("{\"schema_version\":1}\n"), Err(LogError::EmptyEntry { line: 1 })));
    }

    #[test]
    fn csv_columns_fixed() {
        let mut buf = Vec::new();
        write_csv(&table_log(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 11);
    }
}
