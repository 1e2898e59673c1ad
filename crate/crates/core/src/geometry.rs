//! LIDAR-to-image projection: `lambda [u, v, 1]^T = P R T p`.

use nalgebra::{Matrix3x4, Matrix4, Vector4};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("LIDAR-to-camera rotation is not orthonormal with det +1 (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("non-finite value in calibration matrix {0}")]
    NonFinite(&'static str),
    #[error("image size must be positive, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
}

/// One LIDAR return in the sensor frame (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub reflectance: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, reflectance: f32) -> Self {
        Self {
            x,
            y,
            z,
            reflectance,
        }
    }

    pub fn homogeneous(&self) -> Vector4<f64> {
        Vector4::new(self.x as f64, self.y as f64, self.z as f64, 1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
    }
}

/// Camera projection `P` (3x4), rectification `R` and LIDAR-to-camera
/// transform `T` (both 4x4 with homogeneous padding).
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    projection: Matrix3x4<f64>,
    rectification: Matrix4<f64>,
    lidar_to_camera: Matrix4<f64>,
    chain: Matrix3x4<f64>,
}

impl CalibrationSet {
    /// Validates `T` (rotation block orthonormal with det +1 within 1e-4).
    pub fn new(
        projection: Matrix3x4<f64>,
        rectification: Matrix4<f64>,
        lidar_to_camera: Matrix4<f64>,
    ) -> Result<Self, GeometryError> {
        for (name, finite) in [
            ("P", projection.iter().all(|v| v.is_finite())),
            ("R", rectification.iter().all(|v| v.is_finite())),
            ("T", lidar_to_camera.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(GeometryError::NonFinite(name));
            }
        }
        let rot = lidar_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (rot.transpose() * rot - nalgebra::Matrix3::identity())
            .abs()
            .max();
        let det = (rot.determinant() - 1.0).abs();
        let deviation = ortho.max(det);
        if deviation > 1e-4 {
            return Err(GeometryError::NotARotation(deviation));
        }
        Ok(Self {
            chain: projection * rectification * lidar_to_camera,
            projection,
            rectification,
            lidar_to_camera,
        })
    }

    /// Pinhole camera with identity rectification and extrinsics.
    pub fn pinhole(focal: f64, cu: f64, cv: f64) -> Self {
        #[rustfmt::skip]
        let p = Matrix3x4::new(
            focal, 0.0, cu, 0.0,
            0.0, focal, cv, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        Self::new(p, Matrix4::identity(), Matrix4::identity()).expect("identity is a rotation")
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    pub fn rectification(&self) -> &Matrix4<f64> {
        &self.rectification
    }

    pub fn lidar_to_camera(&self) -> &Matrix4<f64> {
        &self.lidar_to_camera
    }

    /// The combined 3x4 map `P R T`.
    pub fn chain(&self) -> &Matrix3x4<f64> {
        &self.chain
    }

    /// Point in the rectified camera frame, `R T p`.
    pub fn to_camera(&self, p: &Vector4<f64>) -> Vector4<f64> {
        self.rectification * self.lidar_to_camera * p
    }
}

/// A projected point: column `u`, row `v` and scale `lambda` (depth along the
/// optical axis for a standard `P`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub lambda: f64,
}

/// Solves the projection equation for one homogeneous point; `None` when the
/// point lies behind the camera (`lambda <= 0`).
pub fn project_point(p: &Vector4<f64>, calib: &CalibrationSet) -> Option<Projection> {
    let q = calib.chain * p;
    let lambda = q[2];
    if lambda <= 0.0 || !lambda.is_finite() {
        return None;
    }
    Some(Projection {
        u: q[0] / lambda,
        v: q[1] / lambda,
        lambda,
    })
}

/// Pixel a projection falls into (round to nearest), if inside the image.
pub fn pixel_of(proj: &Projection, width: usize, height: usize) -> Option<(usize, usize)> {
    let (col, row) = (proj.u.round(), proj.v.round());
    if col >= 0.0 && row >= 0.0 && col < width as f64 && row < height as f64 {
        Some((col as usize, row as usize))
    } else {
        None
    }
}

/// Coordinate frame stored in the ZYX channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChannelFrame {
    #[default]
    Lidar,
    Camera,
}

/// Sparse three-channel image of projected coordinates. Pixels without a
/// point hold 0 in every channel and `false` in the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseZyxImage {
    pub width: usize,
    pub height: usize,
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub mask: Vec<bool>,
}

impl SparseZyxImage {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            z: vec![0.0; n],
            y: vec![0.0; n],
            x: vec![0.0; n],
            mask: vec![false; n],
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn channels(&self) -> [&[f64]; 3] {
        [&self.z, &self.y, &self.x]
    }

    pub fn set(&mut self, idx: usize, zyx: [f64; 3]) {
        self.z[idx] = zyx[0];
        self.y[idx] = zyx[1];
        self.x[idx] = zyx[2];
        self.mask[idx] = true;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSummary {
    pub points_in: usize,
    /// Points that hit a pixel (before collision resolution).
    pub points_in_view: usize,
    pub pixels_set: usize,
}

/// Projects every point, dropping those behind the camera or outside the
/// image. When several points land on one pixel the smallest `lambda` wins;
/// exact ties keep the earlier point.
pub fn project_cloud(
    cloud: &PointCloud,
    calib: &CalibrationSet,
    width: usize,
    height: usize,
    frame: ChannelFrame,
) -> Result<(SparseZyxImage, ProjectionSummary), GeometryError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::EmptyImage { width, height });
    }
    let mut img = SparseZyxImage::empty(width, height);
    let mut depth = vec![f64::INFINITY; width * height];
    let mut in_view = 0;
    for point in &cloud.points {
        let p = point.homogeneous();
        let Some(proj) = project_point(&p, calib) else {
            continue;
        };
        let Some((col, row)) = pixel_of(&proj, width, height) else {
            continue;
        };
        in_view += 1;
        let idx = row * width + col;
        if proj.lambda < depth[idx] {
            depth[idx] = proj.lambda;
            let zyx = match frame {
                ChannelFrame::Lidar => [p[2], p[1], p[0]],
                ChannelFrame::Camera => {
                    let c = calib.to_camera(&p);
                    [c[2], c[1], c[0]]
                }
            };
            img.set(idx, zyx);
        }
    }
    let summary = ProjectionSummary {
        points_in: cloud.len(),
        points_in_view: in_view,
        pixels_set: img.masked_count(),
    };
    Ok((img, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use nalgebra::{Rotation3, Vector3};

    fn random_calibration(rng: &mut RngState) -> CalibrationSet {
        let rot = Rotation3::from_euler_angles(
            rng.uniform_range(-0.2, 0.2),
            rng.uniform_range(-0.2, 0.2),
            rng.uniform_range(-0.2, 0.2),
        );
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::new(
            rng.uniform_range(-0.5, 0.5),
            rng.uniform_range(-0.5, 0.5),
            rng.uniform_range(-0.5, 0.5),
        ));
        let rect_rot = Rotation3::from_euler_angles(0.01, -0.02, 0.005);
        let mut r = Matrix4::identity();
        r.fixed_view_mut::<3, 3>(0, 0).copy_from(rect_rot.matrix());
        let f = rng.uniform_range(400.0, 800.0);
        #[rustfmt::skip]
        let p = Matrix3x4::new(
            f, 0.0, 600.0, rng.uniform_range(-40.0, 40.0),
            0.0, f, 180.0, rng.uniform_range(-1.0, 1.0),
            0.0, 0.0, 1.0, rng.uniform_range(-0.01, 0.01),
        );
        CalibrationSet::new(p, r, t).unwrap()
    }

    /// Explicit row-by-column products, no nalgebra.
    fn chain_oracle(c: &CalibrationSet, p: [f64; 4]) -> [f64; 3] {
        let mul44 = |m: &Matrix4<f64>, v: [f64; 4]| -> [f64; 4] {
            let mut out = [0.0; 4];
            for (i, o) in out.iter_mut().enumerate() {
                for (j, vj) in v.iter().enumerate() {
                    *o += m[(i, j)] * vj;
                }
            }
            out
        };
        let tp = mul44(c.lidar_to_camera(), p);
        let rtp = mul44(c.rectification(), tp);
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, v) in rtp.iter().enumerate() {
                *o += c.projection()[(i, j)] * v;
            }
        }
        out
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let c = CalibrationSet::pinhole(700.0, 620.0, 180.0);
        let pr = project_point(&Vector4::new(0.0, 0.0, 12.5, 1.0), &c).unwrap();
        assert_eq!((pr.u, pr.v, pr.lambda), (620.0, 180.0, 12.5));
        let pr = project_point(&Vector4::new(1.5, -0.5, 10.0, 1.0), &c).unwrap();
        assert!((pr.u - (700.0 * 1.5 / 10.0 + 620.0)).abs() < 1e-12);
        assert!((pr.v - (700.0 * -0.5 / 10.0 + 180.0)).abs() < 1e-12);
        assert!(project_point(&Vector4::new(0.0, 0.0, -1.0, 1.0), &c).is_none());
        assert!(project_point(&Vector4::new(1.0, 0.0, 0.0, 1.0), &c).is_none());
    }

    #[test]
    fn random_chain_matches_explicit_products() {
        let mut rng = RngState::new(100);
        for _ in 0..50 {
            let c = random_calibration(&mut rng);
            let p = [
                rng.uniform_range(-20.0, 20.0),
                rng.uniform_range(-20.0, 20.0),
                rng.uniform_range(-3.0, 40.0),
                1.0,
            ];
            let q = chain_oracle(&c, p);
            match project_point(&Vector4::from(p), &c) {
                Some(pr) => {
                    assert!(q[2] > 0.0);
                    assert!((pr.lambda - q[2]).abs() < 1e-9);
                    assert!((pr.u - q[0] / q[2]).abs() < 1e-9);
                    assert!((pr.v - q[1] / q[2]).abs() < 1e-9);
                }
                None => assert!(q[2] <= 0.0),
            }
        }
    }

    #[test]
    fn rejects_non_rotation_extrinsics() {
        let mut t = Matrix4::identity();
        t[(0, 0)] = 1.1;
        let err = CalibrationSet::new(Matrix3x4::identity(), Matrix4::identity(), t).unwrap_err();
        assert!(matches!(err, GeometryError::NotARotation(_)));
        let mut t = Matrix4::identity();
        t[(0, 0)] = -1.0; // reflection, det -1
        assert!(CalibrationSet::new(Matrix3x4::identity(), Matrix4::identity(), t).is_err());
    }

    #[test]
    fn empty_and_singleton_clouds() {
        let c = CalibrationSet::pinhole(50.0, 10.0, 5.0);
        let (img, s) =
            project_cloud(&PointCloud::default(), &c, 20, 10, ChannelFrame::Lidar).unwrap();
        assert_eq!(img.masked_count(), 0);
        assert_eq!(s.points_in, 0);
        let cloud = PointCloud::new(vec![Point::new(0.4, -0.2, 10.0, 0.3)]);
        let (img, _) = project_cloud(&cloud, &c, 20, 10, ChannelFrame::Lidar).unwrap();
        assert_eq!(img.masked_count(), 1);
        // u = 50*0.4/10+10 = 12, v = 50*(-0.2)/10+5 = 4
        let idx = 4 * 20 + 12;
        assert!(img.mask[idx]);
        assert_eq!(img.x[idx], 0.4f32 as f64);
        assert_eq!(img.y[idx], -0.2f32 as f64);
        assert_eq!(img.z[idx], 10.0);
    }

    #[test]
    fn nearest_point_wins_collisions() {
        let c = CalibrationSet::pinhole(50.0, 10.0, 5.0);
        let cloud = PointCloud::new(vec![
            Point::new(0.0, 0.0, 20.0, 0.0),
            Point::new(0.0, 0.0, 5.0, 0.0),
            Point::new(0.0, 0.0, 9.0, 0.0),
        ]);
        let (img, s) = project_cloud(&cloud, &c, 20, 10, ChannelFrame::Lidar).unwrap();
        assert_eq!(s.points_in_view, 3);
        assert_eq!(img.masked_count(), 1);
        assert_eq!(img.z[5 * 20 + 10], 5.0);
    }

    #[test]
    fn camera_frame_channels() {
        let mut t = Matrix4::identity();
        t[(2, 3)] = 1.0;
        #[rustfmt::skip]
        let p = Matrix3x4::new(
            50.0, 0.0, 10.0, 0.0,
            0.0, 50.0, 5.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
        );
        let c = CalibrationSet::new(p, Matrix4::identity(), t).unwrap();
        let cloud = PointCloud::new(vec![Point::new(0.0, 0.0, 4.0, 0.0)]);
        let (img, _) = project_cloud(&cloud, &c, 20, 10, ChannelFrame::Camera).unwrap();
        assert_eq!(img.z[5 * 20 + 10], 5.0);
        let (img, _) = project_cloud(&cloud, &c, 20, 10, ChannelFrame::Lidar).unwrap();
        assert_eq!(img.z[5 * 20 + 10], 4.0);
    }

    #[test]
    fn zero_sized_image_is_rejected() {
        let c = CalibrationSet::pinhole(50.0, 10.0, 5.0);
        assert!(project_cloud(&PointCloud::default(), &c, 0, 4, ChannelFrame::Lidar).is_err());
    }
}
