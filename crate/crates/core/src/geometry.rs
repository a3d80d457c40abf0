//! Pinhole camera model, rigid poses and the pixel/world transfers built on
//! them.
//!
//! Conventions used throughout the crate:
//! - pixel `x` is the column and `y` the row, origin at the top-left, pixel
//!   centers at integer coordinates;
//! - camera frame is x right, y down, z forward;
//! - a [`Pose`] maps camera coordinates to world coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics(
                "image size must be nonzero".into(),
            ));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Camera-frame direction through `(x, y)` with unit z component.
    #[inline]
    pub fn normalized(&self, x: f64, y: f64) -> Vec3 {
        Vec3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point; no z check.
    #[inline]
    pub fn project_camera(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Nearest integer pixel of a continuous position, if inside the image.
    #[inline]
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let px = (x + 0.5).floor();
        let py = (y + 0.5).floor();
        if px >= 0.0 && py >= 0.0 && px < self.width as f64 && py < self.height as f64 {
            Some((px as usize, py as usize))
        } else {
            None
        }
    }

    /// Reads the one-line `fx fy cx cy width height` format.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (lineno, line) = text
            .lines()
            .enumerate()
            .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .ok_or_else(|| Error::parse(path, 1, "empty intrinsics file"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected 6 fields, found {}", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::parse(path, lineno + 1, format!("field {}: {e}", i + 1)))
        };
        let dim = |i: usize| -> Result<usize> {
            fields[i]
                .parse::<usize>()
                .map_err(|e| Error::parse(path, lineno + 1, format!("field {}: {e}", i + 1)))
        };
        Self::new(num(0)?, num(1)?, num(2)?, num(3)?, dim(4)?, dim(5)?)
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation
            .iter()
            .chain(translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let err = (rotation.transpose() * rotation - Mat3::identity()).amax();
        if err >= ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (|R^T R - I| = {err:e})"
            )));
        }
        if rotation.determinant() <= 0.0 {
            return Err(Error::InvalidPose(
                "rotation has negative determinant".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// World point into this camera's frame.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose(format!(
                "last row must be 0 0 0 1, found {bottom:?}"
            )));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// A detector response at an integer pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: u32,
    pub y: u32,
    pub confidence: f64,
}

impl Detection {
    pub fn new(x: u32, y: u32, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn pixel(&self) -> (usize, usize) {
        (self.x as usize, self.y as usize)
    }
}

/// Per-pixel metric depth, row-major; 0 marks pixels with no data.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "depth buffer has {} values for {width}x{height}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid depth value {bad}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        debug_assert!(value.is_finite() && value >= 0.0);
        self.data[y * self.width + x] = value;
    }

    /// Valid depth at `(x, y)` or `None` for the no-data sentinel.
    #[inline]
    pub fn valid(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.get(x, y);
        (d > 0.0).then_some(d as f64)
    }
}

/// Back-projects a pixel at metric depth into world coordinates.
pub fn unproject(
    pixel: (f64, f64),
    depth: f64,
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> Result<Vec3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    if !intr.contains(pixel.0, pixel.1) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({}, {}) outside {}x{} image",
            pixel.0, pixel.1, intr.width, intr.height
        )));
    }
    Ok(pose.transform_point(&(intr.normalized(pixel.0, pixel.1) * depth)))
}

/// Projects a world point; returns the continuous pixel and camera depth.
pub fn project(point: &Vec3, intr: &CameraIntrinsics, pose: &Pose) -> Result<((f64, f64), f64)> {
    let p = pose.inverse_transform_point(point);
    if p.z <= 0.0 {
        return Err(Error::BehindCamera(p.z));
    }
    Ok((intr.project_camera(&p), p.z))
}

pub fn pixel_ray(pixel: (f64, f64), intr: &CameraIntrinsics, pose: &Pose) -> Ray {
    let dir = pose.rotation() * intr.normalized(pixel.0, pixel.1);
    Ray {
        origin: *pose.translation(),
        direction: dir.normalize(),
    }
}

/// Maps candidate-camera coordinates to query-camera coordinates.
pub fn relative_transform(candidate: &Pose, query: &Pose) -> (Mat3, Vec3) {
    let rel = query.inverse().compose(candidate);
    (rel.rotation, rel.translation)
}

/// Reads `frame_index m00 .. m33` lines (camera-to-world, row-major).
pub fn load_poses(path: &Path) -> Result<Vec<(usize, Pose)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 17 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 17 fields, found {}", fields.len()),
            ));
        }
        let index = fields[0]
            .parse::<usize>()
            .map_err(|e| Error::parse(path, i + 1, format!("frame index: {e}")))?;
        let mut vals = [0.0f64; 16];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = fields[k + 1]
                .parse()
                .map_err(|e| Error::parse(path, i + 1, format!("matrix entry {k}: {e}")))?;
        }
        let m = Matrix4::from_row_slice(&vals);
        let pose = Pose::from_matrix(&m).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        out.push((index, pose));
    }
    Ok(out)
}

pub fn format_poses<'a>(poses: impl IntoIterator<Item = (usize, &'a Pose)>) -> String {
    let mut s = String::new();
    for (index, pose) in poses {
        let m = pose.to_matrix();
        let _ = write!(s, "{index}");
        for r in 0..4 {
            for c in 0..4 {
                let _ = write!(s, " {}", m[(r, c)]);
            }
        }
        s.push('\n');
    }
    s
}

/// Rotation about an axis through the origin (Rodrigues).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(250.0, 250.0, 160.0, 120.0, 320, 240).unwrap()
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let k = intr();
        let p = unproject((k.cx, k.cy), 2.0, &k, &Pose::identity()).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 2.0));
        let k = CameraIntrinsics::new(100.0, 100.0, 160.0, 120.0, 320, 240).unwrap();
        let p = unproject((k.cx + k.fx, k.cy), 1.0, &k, &Pose::identity()).unwrap();
        assert_relative_eq!(p, Vec3::new(1.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn unproject_matches_hand_multiplied_matrix() {
        // 90° yaw about z, translation (1, 2, 0). The homogeneous matrix is
        // [[0,-1,0,1],[1,0,0,2],[0,0,1,0],[0,0,0,1]]. Pixel (100, 50) at depth
        // 3 gives camera point ((100-160)/250*3, (50-120)/250*3, 3)
        // = (-0.72, -0.84, 3); multiplying out: (0.84+1, -0.72+2, 3).
        let k = intr();
        let pose = Pose::new(axis_angle(&Vec3::z(), FRAC_PI_2), Vec3::new(1.0, 2.0, 0.0)).unwrap();
        let p = unproject((100.0, 50.0), 3.0, &k, &pose).unwrap();
        assert_relative_eq!(p, Vec3::new(1.84, 1.28, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn nonpositive_depth_rejected() {
        let k = intr();
        assert!(matches!(
            unproject((1.0, 1.0), 0.0, &k, &Pose::identity()),
            Err(Error::InvalidDepth(_))
        ));
        assert!(unproject((1.0, 1.0), -2.0, &k, &Pose::identity()).is_err());
    }

    #[test]
    fn project_inverts_unproject_and_rejects_behind() {
        let k = intr();
        let ((x, y), z) = project(&Vec3::new(0.0, 0.0, 2.0), &k, &Pose::identity()).unwrap();
        assert_eq!((x, y, z), (k.cx, k.cy, 2.0));
        assert!(matches!(
            project(&Vec3::new(0.0, 0.0, -1.0), &k, &Pose::identity()),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn pixel_ray_basics() {
        let k = intr();
        let r = pixel_ray((k.cx, k.cy), &k, &Pose::identity());
        assert_eq!(r.origin, Vec3::zeros());
        assert_eq!(r.direction, Vec3::z());
        let flipped =
            Pose::new(axis_angle(&Vec3::y(), std::f64::consts::PI), Vec3::zeros()).unwrap();
        let r = pixel_ray((k.cx, k.cy), &k, &flipped);
        assert_relative_eq!(r.direction, -Vec3::z(), epsilon = 1e-15);
    }

    #[test]
    fn relative_transform_cases() {
        let p = Pose::new(
            axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7),
            Vec3::new(0.3, -1.0, 2.0),
        )
        .unwrap();
        let (r, t) = relative_transform(&p, &p);
        assert!((r - Mat3::identity()).amax() < 1e-12);
        assert!(t.amax() < 1e-12);

        let q = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let (r, t) = relative_transform(&Pose::identity(), &q);
        assert_eq!(r, Mat3::identity());
        assert_eq!(t, Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn pose_validation() {
        let mut bad = Mat3::identity();
        bad[(0, 1)] = 1e-6;
        assert!(Pose::new(bad, Vec3::zeros()).is_err());
        let reflect = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflect, Vec3::zeros()).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.5, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn pose_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let a = Pose::new(
            axis_angle(&Vec3::new(0.2, 1.0, -0.4), 1.3),
            Vec3::new(1.5, -0.25, 3.0),
        )
        .unwrap();
        let b = Pose::identity();
        fs::write(&path, format_poses([(0, &a), (30, &b)])).unwrap();
        let loaded = load_poses(&path).unwrap();
        assert_eq!(loaded, vec![(0, a), (30, b)]);

        fs::write(&path, "0 1 0 0\n").unwrap();
        match load_poses(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn intrinsics_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intrinsics.txt");
        let k = CameraIntrinsics::new(251.5, 249.25, 159.5, 119.5, 320, 240).unwrap();
        fs::write(&path, k.to_line()).unwrap();
        assert_eq!(CameraIntrinsics::load(&path).unwrap(), k);
    }
}
