//! Glue between the per-module steps: cloud to dense ZYX image, and
//! manifest to training dataset.

use crate::dataio::{self, DataError, FrameRecord, LoadOptions, Manifest, Split};
use crate::densify::{densify, DenseZyxImage, DensifyError};
use crate::geometry::{
    project_cloud, CalibrationSet, ChannelFrame, GeometryError, PointCloud, ProjectionSummary,
};
use crate::numerics::{LabelMap, Tensor};
use crate::trainer::{Dataset, Sample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessOptions {
    pub window: usize,
    pub power: f64,
    pub frame: ChannelFrame,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            window: crate::densify::DEFAULT_WINDOW,
            power: crate::densify::DEFAULT_POWER,
            frame: ChannelFrame::Lidar,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Densify(#[from] DensifyError),
}

/// Projects and densifies one cloud onto a `width x height` image.
pub fn dense_zyx(
    cloud: &PointCloud,
    calib: &CalibrationSet,
    width: usize,
    height: usize,
    opts: PreprocessOptions,
) -> Result<(DenseZyxImage, ProjectionSummary), PreprocessError> {
    let (sparse, summary) = project_cloud(cloud, calib, width, height, opts.frame)?;
    Ok((densify(&sparse, opts.window, opts.power)?, summary))
}

/// Reads a frame's cloud, calibration and image size and densifies it.
pub fn preprocess_frame(
    manifest: &Manifest,
    record: &FrameRecord,
    opts: PreprocessOptions,
) -> Result<(DenseZyxImage, ProjectionSummary), PreprocessError> {
    let need = |p: &Option<std::path::PathBuf>, what: &str| {
        p.as_ref()
            .map(|p| manifest.resolve(p))
            .ok_or_else(|| DataError::Frame {
                id: record.id.clone(),
                message: format!("no {what} path"),
            })
    };
    let cloud = dataio::read_cloud(&need(&record.cloud, "cloud")?)?;
    let calib = dataio::read_calibration(&need(&record.calib, "calibration")?, &record.camera)?;
    let rgb = dataio::read_rgb(&need(&record.rgb, "image")?)?;
    dense_zyx(
        &cloud,
        &calib,
        rgb.width() as usize,
        rgb.height() as usize,
        opts,
    )
}

/// Loads every frame of `split` with ground truth.
pub fn load_split(
    manifest: &Manifest,
    split: Split,
    opts: LoadOptions,
) -> Result<Vec<Sample>, DataError> {
    manifest
        .split(split)
        .map(|r| dataio::load_sample(manifest, r, opts))
        .collect()
}

/// Builds an in-memory sample from already decoded parts.
pub fn sample_from_parts(
    id: &str,
    rgb: Option<Tensor>,
    zyx: Option<&DenseZyxImage>,
    labels: LabelMap,
) -> Sample {
    Sample {
        id: id.to_string(),
        rgb,
        zyx: zyx.map(dataio::zyx::zyx_to_tensor),
        labels,
    }
}

/// Training and validation splits of a manifest. Without validation frames
/// the training frames are used for validation too.
pub fn load_dataset(manifest: &Manifest, opts: LoadOptions) -> Result<Dataset, DataError> {
    let train = load_split(manifest, Split::Train, opts)?;
    let mut val = load_split(manifest, Split::Val, opts)?;
    if val.is_empty() {
        log::warn!("manifest has no validation frames; validating on the training split");
        val = train.clone();
    }
    Ok(Dataset { train, val })
}
