//! Procedural road scenes with a matching camera image, LIDAR sweep,
//! calibration and ground truth, for demos and tests.
//!
//! The LIDAR frame has x forward, y left and z up, with the sensor 1.73 m
//! above a flat ground plane. A curved road strip runs ahead; boxes stand
//! beside it. The camera sits slightly behind and below the sensor and looks
//! forward; its image is rendered by casting one ray per pixel, and a pixel
//! is road exactly when its ray first hits the road surface.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3x4, Matrix4, Vector3};

use crate::dataio::{self, calib, cloud, images, DataError, FrameRecord, Manifest, Split};
use crate::geometry::{CalibrationSet, Point, PointCloud};
use crate::numerics::{LabelMap, RngState};

pub const SENSOR_HEIGHT: f64 = 1.73;
const MAX_RANGE: f64 = 80.0;
const BEAMS: usize = 64;
const AZIMUTH_STEP_DEG: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Road,
    OffRoad,
    Block(usize),
}

#[derive(Clone, Debug)]
struct Block {
    min: Vector3<f64>,
    max: Vector3<f64>,
    color: [f64; 3],
}

#[derive(Clone, Debug)]
struct Scene {
    /// Road centre line `y = c0 + c1 x + c2 x^2`.
    centre: [f64; 3],
    half_width: f64,
    blocks: Vec<Block>,
    /// Ground shadows `(x, y, radius)`.
    shadows: Vec<(f64, f64, f64)>,
}

impl Scene {
    fn random(rng: &mut RngState) -> Self {
        let centre = [
            rng.uniform_range(-1.5, 1.5),
            rng.uniform_range(-0.08, 0.08),
            rng.uniform_range(-0.004, 0.004),
        ];
        let half_width = rng.uniform_range(3.0, 4.5);
        let mut scene = Scene {
            centre,
            half_width,
            blocks: vec![],
            shadows: vec![],
        };
        let n_blocks = 3 + rng.below(4);
        while scene.blocks.len() < n_blocks {
            let x = rng.uniform_range(6.0, 45.0);
            let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let gap = rng.uniform_range(1.0, 6.0);
            let depth = rng.uniform_range(1.5, 4.0);
            let width = rng.uniform_range(1.5, 4.0);
            let height = rng.uniform_range(1.2, 3.5);
            let edge = scene.road_y(x) + side * (half_width + gap);
            let (y0, y1) = if side > 0.0 {
                (edge, edge + width)
            } else {
                (edge - width, edge)
            };
            scene.blocks.push(Block {
                min: Vector3::new(x, y0, -SENSOR_HEIGHT),
                max: Vector3::new(x + depth, y1, -SENSOR_HEIGHT + height),
                color: [
                    rng.uniform_range(0.2, 0.9),
                    rng.uniform_range(0.1, 0.6),
                    rng.uniform_range(0.1, 0.9),
                ],
            });
        }
        for _ in 0..2 + rng.below(3) {
            scene.shadows.push((
                rng.uniform_range(4.0, 30.0),
                rng.uniform_range(-10.0, 10.0),
                rng.uniform_range(1.0, 3.0),
            ));
        }
        scene
    }

    fn road_y(&self, x: f64) -> f64 {
        self.centre[0] + self.centre[1] * x + self.centre[2] * x * x
    }

    fn on_road(&self, p: &Vector3<f64>) -> bool {
        (p.y - self.road_y(p.x)).abs() < self.half_width
    }

    /// First intersection of the ray `o + t d`, `t > 0`.
    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Surface)> {
        let mut best: Option<(f64, Surface)> = None;
        if d.z < -1e-12 {
            let t = (-SENSOR_HEIGHT - o.z) / d.z;
            if t > 0.0 {
                let p = o + d * t;
                let s = if self.on_road(&p) {
                    Surface::Road
                } else {
                    Surface::OffRoad
                };
                best = Some((t, s));
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            let mut hit = true;
            for a in 0..3 {
                if d[a].abs() < 1e-12 {
                    if o[a] < b.min[a] || o[a] > b.max[a] {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((b.min[a] - o[a]) / d[a], (b.max[a] - o[a]) / d[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
            if hit && t0 <= t1 && t0 > 0.0 && best.is_none_or(|(t, _)| t0 < t) {
                best = Some((t0, Surface::Block(i)));
            }
        }
        best
    }

    fn in_shadow(&self, p: &Vector3<f64>) -> bool {
        self.shadows
            .iter()
            .any(|&(x, y, r)| (p.x - x).powi(2) + (p.y - y).powi(2) < r * r)
    }
}

/// One generated frame.
#[derive(Clone, Debug)]
pub struct SyntheticFrame {
    pub id: String,
    pub rgb: RgbImage,
    pub cloud: PointCloud,
    pub calib: CalibrationSet,
    pub labels: LabelMap,
}

/// Calibration for a `width x height` image: focal length `0.58 width`,
/// horizon at 35% of the height, camera 0.27 m behind and 0.08 m below the
/// LIDAR.
pub fn calibration(width: usize, height: usize) -> CalibrationSet {
    let f = 0.58 * width as f64;
    let (cu, cv) = (width as f64 / 2.0, 0.35 * height as f64);
    #[rustfmt::skip]
    let p = Matrix3x4::new(
        f, 0.0, cu, 0.0,
        0.0, f, cv, 0.0,
        0.0, 0.0, 1.0, 0.0,
    );
    // camera x = -lidar y, camera y = -lidar z, camera z = lidar x
    #[rustfmt::skip]
    let t = Matrix4::new(
        0.0, -1.0, 0.0, 0.0,
        0.0, 0.0, -1.0, 0.08,
        1.0, 0.0, 0.0, 0.27,
        0.0, 0.0, 0.0, 1.0,
    );
    CalibrationSet::new(p, Matrix4::identity(), t).expect("valid rotation")
}

fn camera_centre(calib: &CalibrationSet) -> Vector3<f64> {
    let t = calib.lidar_to_camera();
    let r = t.fixed_view::<3, 3>(0, 0);
    let tr = t.fixed_view::<3, 1>(0, 3);
    -(r.transpose() * tr)
}

fn sweep(scene: &Scene, rng: &mut RngState) -> PointCloud {
    let origin = Vector3::zeros();
    let mut points = vec![];
    let steps = (360.0 / AZIMUTH_STEP_DEG).round() as usize;
    for beam in 0..BEAMS {
        let elev = (-24.8 + 26.8 * beam as f64 / (BEAMS - 1) as f64).to_radians();
        for k in 0..steps {
            let az = (k as f64 * AZIMUTH_STEP_DEG).to_radians();
            let d = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let Some((t, surface)) = scene.cast(&origin, &d) else {
                continue;
            };
            if t > MAX_RANGE {
                continue;
            }
            let p = d * (t + 0.01 * rng.normal());
            let reflectance = match surface {
                Surface::Road => 0.3,
                Surface::OffRoad => 0.55,
                Surface::Block(_) => 0.8,
            };
            points.push(Point::new(p.x as f32, p.y as f32, p.z as f32, reflectance));
        }
    }
    PointCloud::new(points)
}

fn render(
    scene: &Scene,
    calib: &CalibrationSet,
    width: usize,
    height: usize,
    rng: &mut RngState,
) -> (RgbImage, LabelMap) {
    let p = calib.projection();
    let (f, cu, cv) = (p[(0, 0)], p[(0, 2)], p[(1, 2)]);
    let t = calib.lidar_to_camera();
    let r = t.fixed_view::<3, 3>(0, 0).transpose();
    let origin = camera_centre(calib);
    let mut img = RgbImage::new(width as u32, height as u32);
    let mut labels = LabelMap::new(height, width, LabelMap::NOT_ROAD);
    for v in 0..height {
        for u in 0..width {
            let cam = Vector3::new((u as f64 - cu) / f, (v as f64 - cv) / f, 1.0);
            let d = r * cam;
            let noise = 0.04 * rng.normal();
            let mut c = match scene.cast(&origin, &d) {
                None => {
                    let k = v as f64 / height as f64;
                    [0.5 + 0.2 * k, 0.7 + 0.1 * k, 0.95]
                }
                Some((t, surface)) => {
                    let hit = origin + d * t;
                    let mut c = match surface {
                        Surface::Road => {
                            labels.set(v, u, LabelMap::ROAD);
                            let marking = (hit.y - scene.road_y(hit.x)).abs() < 0.12
                                && (hit.x / 3.0).floor() as i64 % 2 == 0;
                            if marking {
                                [0.9, 0.9, 0.85]
                            } else {
                                [0.42, 0.42, 0.44]
                            }
                        }
                        Surface::OffRoad => [0.3, 0.5, 0.2],
                        Surface::Block(i) => scene.blocks[i].color,
                    };
                    if hit.z < -SENSOR_HEIGHT + 1e-6 && scene.in_shadow(&hit) {
                        for ch in &mut c {
                            *ch *= 0.5;
                        }
                    }
                    c
                }
            };
            for ch in &mut c {
                *ch = (*ch + noise).clamp(0.0, 1.0);
            }
            img.put_pixel(
                u as u32,
                v as u32,
                Rgb(c.map(|x| (255.0 * x).round() as u8)),
            );
        }
    }
    (img, labels)
}

/// Generates frame `index` of the sequence defined by `seed`.
pub fn generate_frame(width: usize, height: usize, seed: u64, index: usize) -> SyntheticFrame {
    let mut rng = RngState::new(seed).fork(index as u64 + 1);
    let scene = Scene::random(&mut rng);
    let calib = calibration(width, height);
    let cloud = sweep(&scene, &mut rng);
    let (rgb, labels) = render(&scene, &calib, width, height, &mut rng);
    SyntheticFrame {
        id: format!("synth_{index:06}"),
        rgb,
        cloud,
        calib,
        labels,
    }
}

/// Writes `frames` scenes under `dir` (image_2/, velodyne/, calib/, gt/) and
/// returns their manifest records. The first `val` frames go to the
/// validation split, the rest to training.
pub fn write_dataset(
    dir: &Path,
    frames: usize,
    val: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Vec<FrameRecord>, DataError> {
    let categories = [
        dataio::Category::Um,
        dataio::Category::Umm,
        dataio::Category::Uu,
    ];
    for sub in ["image_2", "velodyne", "calib", "gt"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(dataio::io_error(dir))?;
    }
    let mut records = vec![];
    for i in 0..frames {
        let f = generate_frame(width, height, seed, i);
        let split = if i < val { Split::Val } else { Split::Train };
        let mut rec = FrameRecord::new(f.id.clone(), split, categories[i % 3]);
        let rel = |sub: &str, ext: &str| format!("{sub}/{}.{ext}", f.id);
        let (rgb, cl, ca, gt) = (
            rel("image_2", "png"),
            rel("velodyne", "bin"),
            rel("calib", "txt"),
            rel("gt", "png"),
        );
        images::write_rgb(&dir.join(&rgb), &f.rgb)?;
        cloud::write_cloud(&dir.join(&cl), &f.cloud)?;
        let text = calib::format_calibration(&f.calib, &rec.camera);
        std::fs::write(dir.join(&ca), text).map_err(dataio::io_error(dir))?;
        images::write_rgb(&dir.join(&gt), &images::encode_ground_truth(&f.labels))?;
        rec.rgb = Some(rgb.into());
        rec.cloud = Some(cl.into());
        rec.calib = Some(ca.into());
        rec.gt = Some(gt.into());
        records.push(rec);
    }
    Manifest::write(&dir.join("manifest.tsv"), &records)?;
    Ok(records)
}
