//! Dense ZYX files written by preprocessing.
//!
//! ```text
//! magic   "ZYX1"
//! width   u32 LE
//! height  u32 LE
//! z, y, x planes, row-major f32 LE
//! source  one byte per pixel: 0 measured, 1 interpolated, 2 unfilled
//! ```

use std::path::Path;

use super::{io_error, DataError};
use crate::densify::{DenseZyxImage, PixelSource};
use crate::numerics::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"ZYX1";

pub fn encode_zyx(img: &DenseZyxImage) -> Vec<u8> {
    let n = img.width * img.height;
    let mut out = Vec::with_capacity(12 + 13 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    for plane in img.channels() {
        for &v in plane {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend(img.source.iter().map(|s| match s {
        PixelSource::Measured => 0u8,
        PixelSource::Interpolated => 1,
        PixelSource::Unfilled => 2,
    }));
    out
}

pub fn decode_zyx(bytes: &[u8]) -> Result<DenseZyxImage, DataError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(DataError::Format("missing ZYX1 header".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = width * height;
    let expected = 12 + 13 * n;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            offset: bytes.len().min(expected),
            len: bytes.len(),
        });
    }
    let plane = |k: usize| -> Vec<f64> {
        let start = 12 + 4 * n * k;
        bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect()
    };
    let source = bytes[12 + 12 * n..]
        .iter()
        .enumerate()
        .map(|(i, b)| match b {
            0 => Ok(PixelSource::Measured),
            1 => Ok(PixelSource::Interpolated),
            2 => Ok(PixelSource::Unfilled),
            _ => Err(DataError::Format(format!(
                "bad source code {b} at pixel {i}"
            ))),
        })
        .collect::<Result<_, _>>()?;
    Ok(DenseZyxImage {
        width,
        height,
        z: plane(0),
        y: plane(1),
        x: plane(2),
        source,
    })
}

pub fn write_zyx(path: &Path, img: &DenseZyxImage) -> Result<(), DataError> {
    std::fs::write(path, encode_zyx(img)).map_err(io_error(path))
}

pub fn read_zyx(path: &Path) -> Result<DenseZyxImage, DataError> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    decode_zyx(&bytes).map_err(|e| e.at(path))
}

/// `1 x 3 x H x W` tensor with channels z, y, x.
pub fn zyx_to_tensor(img: &DenseZyxImage) -> Tensor {
    let mut data = Vec::with_capacity(3 * img.width * img.height);
    for plane in img.channels() {
        data.extend_from_slice(plane);
    }
    Tensor::from_vec(Shape::new(1, 3, img.height, img.width), data).expect("three planes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = DenseZyxImage {
            width: 3,
            height: 2,
            z: vec![-1.5, 0.0, 2.0, 0.25, 0.0, 1.0],
            y: vec![1.0; 6],
            x: vec![10.0, 20.0, 30.0, 40.0, 0.0, 60.0],
            source: vec![
                PixelSource::Measured,
                PixelSource::Interpolated,
                PixelSource::Measured,
                PixelSource::Measured,
                PixelSource::Unfilled,
                PixelSource::Interpolated,
            ],
        };
        let bytes = encode_zyx(&img);
        assert_eq!(decode_zyx(&bytes).unwrap(), img);
        assert!(decode_zyx(&bytes[..bytes.len() - 1]).is_err());
        let t = zyx_to_tensor(&img);
        assert_eq!(t.get(0, 2, 1, 2), 60.0);
        assert_eq!(t.get(0, 0, 0, 0), -1.5);
    }
}
