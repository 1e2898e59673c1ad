//! Reading and writing everything that lives on disk.

pub mod calib;
pub mod cloud;
pub mod images;
pub mod manifest;
pub mod zyx;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::network::FusionMode;
use crate::numerics::{LabelMap, Tensor};
use crate::trainer::Sample;

pub use calib::{read_calibration, DEFAULT_CAMERA_KEY};
pub use cloud::{read_cloud, write_cloud};
pub use images::{
    decode_ground_truth, pad_labels, pad_rgb, read_rgb, write_segmentation, CANVAS_HEIGHT,
    CANVAS_WIDTH,
};
pub use manifest::{Category, FrameRecord, Manifest, Split};
pub use zyx::{read_zyx, write_zyx};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("file truncated: {len} bytes, last complete record ends at byte {offset}")]
    Truncated { offset: usize, len: usize },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("missing calibration key {0}")]
    MissingKey(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{0}")]
    Dimension(String),
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        source: Box<DataError>,
    },
    #[error("frame {id}: {message}")]
    Frame { id: String, message: String },
}

impl DataError {
    /// Attaches the file the error came from.
    pub fn at(self, path: &Path) -> Self {
        match self {
            e @ (DataError::Io { .. } | DataError::Image { .. } | DataError::InFile { .. }) => e,
            e => DataError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, without file context.
    pub fn root(&self) -> &DataError {
        match self {
            DataError::InFile { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |e| DataError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// How frames are turned into network inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub mode: FusionMode,
    /// Pad inputs and labels to this `(height, width)` canvas.
    pub canvas: Option<(usize, usize)>,
    pub require_gt: bool,
}

/// Loads the inputs `opts.mode` needs, plus ground truth when present.
pub fn load_sample(
    manifest: &Manifest,
    record: &FrameRecord,
    opts: LoadOptions,
) -> Result<Sample, DataError> {
    let frame_err = |message: String| DataError::Frame {
        id: record.id.clone(),
        message,
    };
    let rgb = if opts.mode.needs_rgb() {
        let p = record
            .rgb
            .as_ref()
            .ok_or_else(|| frame_err(format!("{} fusion needs an RGB image", opts.mode)))?;
        Some(images::rgb_to_tensor(&read_rgb(&manifest.resolve(p))?))
    } else {
        None
    };
    let zyx = if opts.mode.needs_zyx() {
        let p = record.zyx.as_ref().ok_or_else(|| {
            frame_err(format!(
                "{} fusion needs a dense ZYX image; run preprocess first",
                opts.mode
            ))
        })?;
        Some(zyx::zyx_to_tensor(&read_zyx(&manifest.resolve(p))?))
    } else {
        None
    };
    let shape_of = |t: &Option<Tensor>| t.as_ref().map(|t| (t.shape().height, t.shape().width));
    let (h, w) = shape_of(&rgb)
        .or(shape_of(&zyx))
        .ok_or_else(|| frame_err("no inputs".into()))?;
    if let (Some(a), Some(b)) = (shape_of(&rgb), shape_of(&zyx)) {
        if a != b {
            return Err(frame_err(format!("RGB is {a:?} but ZYX is {b:?}")));
        }
    }
    let labels = match &record.gt {
        Some(p) => {
            let l = decode_ground_truth(&read_rgb(&manifest.resolve(p))?);
            if (l.height(), l.width()) != (h, w) {
                return Err(frame_err(format!(
                    "ground truth is {}x{}, inputs are {h}x{w}",
                    l.height(),
                    l.width()
                )));
            }
            l
        }
        None if opts.require_gt => return Err(frame_err("no ground truth".into())),
        None => LabelMap::new(h, w, LabelMap::IGNORE),
    };
    let mut sample = Sample {
        id: record.id.clone(),
        rgb,
        zyx,
        labels,
    };
    if let Some((ch, cw)) = opts.canvas {
        let pad = |t: Option<Tensor>| t.map(|t| images::pad_tensor(&t, ch, cw)).transpose();
        sample.rgb = pad(sample.rgb)?;
        sample.zyx = pad(sample.zyx)?;
        sample.labels = pad_labels(&sample.labels, ch, cw)?;
    }
    Ok(sample)
}
