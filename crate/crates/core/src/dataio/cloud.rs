//! Point-cloud binaries: consecutive records of four little-endian `f32`
//! values `x, y, z, reflectance`, with no header.

use std::path::Path;

use super::{io_error, DataError};
use crate::geometry::{Point, PointCloud};

pub const POINT_BYTES: usize = 16;

pub fn parse_cloud(bytes: &[u8]) -> Result<PointCloud, DataError> {
    let whole = bytes.len() / POINT_BYTES * POINT_BYTES;
    if whole != bytes.len() {
        return Err(DataError::Truncated {
            offset: whole,
            len: bytes.len(),
        });
    }
    let f = |b: &[u8]| f32::from_le_bytes(b.try_into().unwrap());
    let points = bytes
        .chunks_exact(POINT_BYTES)
        .map(|r| Point::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]), f(&r[12..16])))
        .collect();
    Ok(PointCloud::new(points))
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.reflectance] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_cloud(path: &Path) -> Result<PointCloud, DataError> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    parse_cloud(&bytes).map_err(|e| e.at(path))
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), DataError> {
    std::fs::write(path, encode_cloud(cloud)).map_err(io_error(path))
}
