//! Sparse-to-dense upsampling of projected LIDAR images.
//!
//! Each empty pixel takes the inverse-distance-weighted mean (weight
//! `1 / d^power`, Euclidean pixel distance) of the masked pixels inside a
//! square window centred on it. Masked pixels are copied through untouched,
//! and pixels whose window holds no masked pixel stay 0 and are reported as
//! unfilled.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::SparseZyxImage;

pub const DEFAULT_WINDOW: usize = 11;
pub const DEFAULT_POWER: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensifyError {
    #[error("window must be odd and at least 3, got {0}")]
    Window(usize),
    #[error("power must be positive and finite, got {0}")]
    Power(f64),
}

/// Where a dense pixel's value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelSource {
    Measured,
    Interpolated,
    Unfilled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseZyxImage {
    pub width: usize,
    pub height: usize,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub source: Vec<PixelSource>,
}

impl DenseZyxImage {
    pub fn channels(&self) -> [&[f64]; 3] {
        [&self.z, &self.y, &self.x]
    }

    pub fn unfilled(&self) -> usize {
        self.source
            .iter()
            .filter(|&&s| s == PixelSource::Unfilled)
            .count()
    }

    /// Fraction of pixels carrying a value (measured or interpolated).
    pub fn fill_rate(&self) -> f64 {
        let n = self.source.len();
        if n == 0 {
            return 0.0;
        }
        (n - self.unfilled()) as f64 / n as f64
    }
}

/// Fills the holes of `img` by windowed inverse-distance weighting.
pub fn densify(
    img: &SparseZyxImage,
    window: usize,
    power: f64,
) -> Result<DenseZyxImage, DensifyError> {
    if window < 3 || window % 2 == 0 {
        return Err(DensifyError::Window(window));
    }
    if !(power > 0.0 && power.is_finite()) {
        return Err(DensifyError::Power(power));
    }
    let (w, h) = (img.width, img.height);
    let r = (window / 2) as isize;
    // weights depend only on the offset; the centre is never used
    let weights: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| {
            let d2 = (dy * dy + dx * dx) as f64;
            if d2 == 0.0 {
                0.0
            } else {
                d2.powf(-power / 2.0)
            }
        })
        .collect();
    let side = window;

    let rows: Vec<Vec<([f64; 3], PixelSource)>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let idx = row * w + col;
                    if img.mask[idx] {
                        return ([img.z[idx], img.y[idx], img.x[idx]], PixelSource::Measured);
                    }
                    let mut acc = [0.0; 3];
                    let mut total = 0.0;
                    for dy in -r..=r {
                        let yy = row as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in -r..=r {
                            let xx = col as isize + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let j = yy as usize * w + xx as usize;
                            if !img.mask[j] {
                                continue;
                            }
                            let wt = weights[((dy + r) as usize) * side + (dx + r) as usize];
                            acc[0] += wt * img.z[j];
                            acc[1] += wt * img.y[j];
                            acc[2] += wt * img.x[j];
                            total += wt;
                        }
                    }
                    if total > 0.0 {
                        (
                            [acc[0] / total, acc[1] / total, acc[2] / total],
                            PixelSource::Interpolated,
                        )
                    } else {
                        ([0.0; 3], PixelSource::Unfilled)
                    }
                })
                .collect()
        })
        .collect();

    let n = w * h;
    let mut out = DenseZyxImage {
        width: w,
        height: h,
        z: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        source: Vec::with_capacity(n),
    };
    for (v, s) in rows.into_iter().flatten() {
        out.z.push(v[0]);
        out.y.push(v[1]);
        out.x.push(v[2]);
        out.source.push(s);
    }
    Ok(out)
}
