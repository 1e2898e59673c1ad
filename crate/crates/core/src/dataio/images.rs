//! Camera images, ground-truth colour coding, canvas padding and the
//! segmentation / overlay outputs.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::DataError;
use crate::numerics::{LabelMap, Shape, Tensor};

pub const CANVAS_HEIGHT: usize = 384;
pub const CANVAS_WIDTH: usize = 1248;

pub const ROAD_COLOR: [u8; 3] = [255, 0, 255];
pub const NOT_ROAD_COLOR: [u8; 3] = [255, 0, 0];

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FN_COLOR: [u8; 3] = [255, 0, 0];
pub const FP_COLOR: [u8; 3] = [0, 0, 255];

fn image_error(path: &Path) -> impl FnOnce(image::ImageError) -> DataError + '_ {
    move |e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage, DataError> {
    Ok(image::open(path).map_err(image_error(path))?.to_rgb8())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<(), DataError> {
    img.save(path).map_err(image_error(path))
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<(), DataError> {
    img.save(path).map_err(image_error(path))
}

/// `1 x 3 x H x W` tensor with channel values scaled to `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Exact colour match: road, not-road, anything else is ignored.
pub fn decode_ground_truth(img: &RgbImage) -> LabelMap {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| match p.0 {
            ROAD_COLOR => LabelMap::ROAD,
            NOT_ROAD_COLOR => LabelMap::NOT_ROAD,
            _ => LabelMap::IGNORE,
        })
        .collect();
    LabelMap::from_vec(h, w, data).expect("one label per pixel")
}

/// Inverse of [`decode_ground_truth`]; ignored pixels become black.
pub fn encode_ground_truth(labels: &LabelMap) -> RgbImage {
    let (w, h) = (labels.width(), labels.height());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(match labels.get(y as usize, x as usize) {
            LabelMap::ROAD => ROAD_COLOR,
            LabelMap::NOT_ROAD => NOT_ROAD_COLOR,
            _ => [0, 0, 0],
        })
    })
}

fn check_canvas(h: usize, w: usize, ch: usize, cw: usize) -> Result<(), DataError> {
    if h > ch || w > cw {
        return Err(DataError::Dimension(format!(
            "{h}x{w} image does not fit the {ch}x{cw} canvas"
        )));
    }
    Ok(())
}

/// Places the image at the top-left of a zero-filled canvas.
pub fn pad_rgb(img: &RgbImage, height: usize, width: usize) -> Result<RgbImage, DataError> {
    check_canvas(img.height() as usize, img.width() as usize, height, width)?;
    let mut out = RgbImage::new(width as u32, height as u32);
    image::imageops::replace(&mut out, img, 0, 0);
    Ok(out)
}

/// Pads labels like [`pad_rgb`]; the padding is ignored.
pub fn pad_labels(labels: &LabelMap, height: usize, width: usize) -> Result<LabelMap, DataError> {
    check_canvas(labels.height(), labels.width(), height, width)?;
    let mut out = LabelMap::new(height, width, LabelMap::IGNORE);
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            out.set(y, x, labels.get(y, x));
        }
    }
    Ok(out)
}

pub fn pad_tensor(t: &Tensor, height: usize, width: usize) -> Result<Tensor, DataError> {
    let s = t.shape();
    check_canvas(s.height, s.width, height, width)?;
    t.pad_bottom_right(height, width)
        .map_err(|e| DataError::Dimension(e.to_string()))
}

pub fn crop_rgb(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    image::imageops::crop_imm(img, 0, 0, width as u32, height as u32).to_image()
}

pub fn crop_labels(labels: &LabelMap, height: usize, width: usize) -> LabelMap {
    let mut out = LabelMap::new(height, width, LabelMap::IGNORE);
    for y in 0..height.min(labels.height()) {
        for x in 0..width.min(labels.width()) {
            out.set(y, x, labels.get(y, x));
        }
    }
    out
}

fn check_confidence(conf: &[f64], width: usize, height: usize) -> Result<(), DataError> {
    if conf.len() != width * height {
        return Err(DataError::Dimension(format!(
            "{} confidences for a {height}x{width} image",
            conf.len()
        )));
    }
    if let Some(v) = conf.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DataError::Dimension(format!(
            "confidence {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// 8-bit image with value `round(255 * confidence)`.
pub fn confidence_image(conf: &[f64], width: usize, height: usize) -> Result<GrayImage, DataError> {
    check_confidence(conf, width, height)?;
    let data = conf.iter().map(|c| (255.0 * c).round() as u8).collect();
    Ok(GrayImage::from_raw(width as u32, height as u32, data).expect("sized above"))
}

/// 255 where `confidence >= threshold`, else 0.
pub fn binary_image(
    conf: &[f64],
    width: usize,
    height: usize,
    threshold: f64,
) -> Result<GrayImage, DataError> {
    check_confidence(conf, width, height)?;
    Ok(GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let c = conf[y as usize * width + x as usize];
        Luma([if c >= threshold { 255 } else { 0 }])
    }))
}

/// Writes the confidence image and, when a threshold is given, the
/// binarized image next to it.
pub fn write_segmentation(
    conf: &[f64],
    width: usize,
    height: usize,
    path: &Path,
    binary: Option<(&Path, f64)>,
) -> Result<(), DataError> {
    write_gray(path, &confidence_image(conf, width, height)?)?;
    if let Some((bin_path, t)) = binary {
        write_gray(bin_path, &binary_image(conf, width, height, t)?)?;
    }
    Ok(())
}

/// Camera image with true positives tinted green, false negatives red and
/// false positives blue (half-and-half blend). Ignored pixels are untouched.
pub fn overlay(
    rgb: &RgbImage,
    conf: &[f64],
    labels: &LabelMap,
    threshold: f64,
) -> Result<RgbImage, DataError> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    check_confidence(conf, w, h)?;
    if labels.width() != w || labels.height() != h {
        return Err(DataError::Dimension(format!(
            "{}x{} labels for a {h}x{w} image",
            labels.height(),
            labels.width()
        )));
    }
    let mut out = rgb.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        let predicted = conf[i] >= threshold;
        let tint = match (labels.data()[i], predicted) {
            (LabelMap::ROAD, true) => TP_COLOR,
            (LabelMap::ROAD, false) => FN_COLOR,
            (LabelMap::NOT_ROAD, true) => FP_COLOR,
            _ => continue,
        };
        for c in 0..3 {
            px[c] = ((px[c] as u16 + tint[c] as u16) / 2) as u8;
        }
    }
    Ok(out)
}
