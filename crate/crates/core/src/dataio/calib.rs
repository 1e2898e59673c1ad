//! KITTI-style calibration text: one `KEY: v1 v2 ...` entry per line.
//!
//! The camera projection (default key `P2`, 12 values, row-major 3x4), the
//! rectifying rotation `R0_rect` (9 values) and the LIDAR-to-camera
//! transform `Tr_velo_to_cam` (12 values) are required. Values of other keys
//! are not interpreted.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Matrix3x4, Matrix4};

use super::{io_error, DataError};
use crate::geometry::CalibrationSet;

pub const DEFAULT_CAMERA_KEY: &str = "P2";
const RECT_KEYS: [&str; 2] = ["R0_rect", "R_rect"];
const VELO_KEYS: [&str; 2] = ["Tr_velo_to_cam", "Tr_velo_cam"];

pub fn parse_calibration(text: &str, camera_key: &str) -> Result<CalibrationSet, DataError> {
    let mut entries: HashMap<&str, (usize, &str)> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, values)) = line.split_once(':') else {
            return Err(DataError::Parse {
                line: i + 1,
                message: format!("expected `KEY: values`, found {line:?}"),
            });
        };
        entries.insert(key.trim(), (i + 1, values));
    }
    let numbers = |keys: &[&str], count: usize| -> Result<Vec<f64>, DataError> {
        let (line, values) = keys
            .iter()
            .find_map(|k| entries.get(k))
            .ok_or_else(|| DataError::MissingKey(keys[0].to_string()))?;
        let parsed = values
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| DataError::Parse {
                    line: *line,
                    message: format!("{t:?} is not a number"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if parsed.len() != count {
            return Err(DataError::Parse {
                line: *line,
                message: format!("{} needs {count} values, found {}", keys[0], parsed.len()),
            });
        }
        Ok(parsed)
    };
    let p = numbers(&[camera_key], 12)?;
    let r = numbers(&RECT_KEYS, 9)?;
    let t = numbers(&VELO_KEYS, 12)?;
    let projection = Matrix3x4::from_row_slice(&p);
    let mut rect = Matrix4::identity();
    for row in 0..3 {
        for col in 0..3 {
            rect[(row, col)] = r[row * 3 + col];
        }
    }
    let mut velo = Matrix4::identity();
    for row in 0..3 {
        for col in 0..4 {
            velo[(row, col)] = t[row * 4 + col];
        }
    }
    Ok(CalibrationSet::new(projection, rect, velo)?)
}

pub fn read_calibration(path: &Path, camera_key: &str) -> Result<CalibrationSet, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    parse_calibration(&text, camera_key).map_err(|e| e.at(path))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values
        .into_iter()
        .map(|v| format!("{v:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes the three matrices in the same text format.
pub fn format_calibration(calib: &CalibrationSet, camera_key: &str) -> String {
    let p = calib.projection();
    let r = calib.rectification();
    let t = calib.lidar_to_camera();
    let p_vals = (0..3).flat_map(|i| (0..4).map(move |j| p[(i, j)]));
    let r_vals = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)]));
    let t_vals = (0..3).flat_map(|i| (0..4).map(move |j| t[(i, j)]));
    format!(
        "{camera_key}: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        join(p_vals),
        join(r_vals),
        join(t_vals)
    )
}
