//! Random-view photographer: orientation sampling, axial validity rays,
//! effective-volume image budget.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{RenderedFrame, Renderer};
use super::{Cuboid, Scene};
use crate::error::{Error, Result};
use crate::geometry::{axis_angle, CameraIntrinsics, Mat3, Pose, Ray, Vec3};
use crate::voxelmap::VoxelMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotographerConfig {
    pub pitch_sigma: f64,
    pub roll_sigma: f64,
    /// Every validity ray must travel at least this far.
    pub lower_bound: f64,
    /// Upper bound of the world up/down rays.
    pub upper_vertical: f64,
    /// Upper bound of the four horizontal world-axis rays.
    pub upper_sides: f64,
    /// Upper bound of the view ray.
    pub upper_view: f64,
    pub images_per_m3: f64,
    pub volume_samples: usize,
    /// Candidate poses tried per requested image before giving up.
    pub attempts_per_image: usize,
    /// Overrides the effective-volume budget when set.
    pub image_count: Option<usize>,
    /// Sub-pixel samples per axis of the rendered image.
    pub supersampling: usize,
    /// Gaussian blur of the rendered image in pixels; 0 disables it.
    pub psf_sigma: f64,
}

impl Default for PhotographerConfig {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            pitch_sigma: PI / 8.0,
            roll_sigma: PI / 4.0,
            lower_bound: 0.6,
            upper_vertical: 5.0,
            upper_sides: 20.0,
            upper_view: 10.0,
            images_per_m3: 10.0,
            volume_samples: 100,
            attempts_per_image: 200,
            image_count: None,
            supersampling: 3,
            psf_sigma: 0.7,
        }
    }
}

impl PhotographerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.pitch_sigma,
            self.roll_sigma,
            self.lower_bound,
            self.upper_vertical,
            self.upper_sides,
            self.upper_view,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "photographer: sigmas and bounds must be positive".into(),
            ));
        }
        if !(self.images_per_m3 >= 0.0)
            || !(self.psf_sigma >= 0.0)
            || self.volume_samples == 0
            || self.attempts_per_image == 0
            || self.supersampling == 0
        {
            return Err(Error::InvalidArgument(
                "photographer: images_per_m3 >= 0, volume_samples, attempts_per_image and supersampling >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Camera axes (right, down, forward) expressed in the z-up world when yaw,
/// pitch and roll are all zero: looking along +x, level.
fn base_rotation() -> Mat3 {
    Mat3::from_columns(&[-Vec3::y(), -Vec3::z(), Vec3::x()])
}

/// Rotation for the given angles: yaw about world up, then pitch
/// (elevation of the view ray), then roll about the view ray.
pub fn rotation_from_angles(yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    axis_angle(&Vec3::z(), yaw)
        * base_rotation()
        * axis_angle(&Vec3::x(), pitch)
        * axis_angle(&Vec3::z(), roll)
}

/// Yaw uniform on [0, 2π), pitch and roll zero-mean normal.
pub fn sample_orientation(rng: &mut impl Rng, cfg: &PhotographerConfig) -> (Mat3, [f64; 3]) {
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let pitch = Normal::new(0.0, cfg.pitch_sigma)
        .expect("positive sigma")
        .sample(rng);
    let roll = Normal::new(0.0, cfg.roll_sigma)
        .expect("positive sigma")
        .sample(rng);
    (rotation_from_angles(yaw, pitch, roll), [yaw, pitch, roll])
}

/// Casts the six world-axis rays and the view ray; every one must hit
/// between the lower bound and its own upper bound.
pub fn validate_position(
    map: &VoxelMap,
    position: &Vec3,
    rotation: &Mat3,
    cfg: &PhotographerConfig,
) -> bool {
    let view = rotation * Vec3::z();
    let rays = [
        (Vec3::x(), cfg.upper_sides),
        (-Vec3::x(), cfg.upper_sides),
        (Vec3::y(), cfg.upper_sides),
        (-Vec3::y(), cfg.upper_sides),
        (Vec3::z(), cfg.upper_vertical),
        (-Vec3::z(), cfg.upper_vertical),
        (view, cfg.upper_view),
    ];
    rays.iter().all(|(dir, upper)| {
        map.raycast(&Ray::new(*position, *dir), *upper)
            .is_some_and(|hit| hit.distance >= cfg.lower_bound)
    })
}

fn sample_position(rng: &mut impl Rng, b: &Cuboid) -> Vec3 {
    Vec3::new(
        rng.random_range(b.lo[0]..b.hi[0]),
        rng.random_range(b.lo[1]..b.hi[1]),
        rng.random_range(b.lo[2]..b.hi[2]),
    )
}

/// Stream ids keep the volume estimate and the pose candidates independent.
const VOLUME_STREAM: u64 = 1 << 40;

fn candidate_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub bbox_volume: f64,
    pub accepted: usize,
    pub samples: usize,
    pub effective_volume: f64,
}

impl VolumeEstimate {
    pub fn ratio(&self) -> f64 {
        self.accepted as f64 / self.samples as f64
    }
}

/// Bounding-box volume scaled by the fraction of random poses that pass
/// validation.
pub fn estimate_effective_volume(
    map: &VoxelMap,
    bbox: &Cuboid,
    cfg: &PhotographerConfig,
    seed: u64,
) -> Result<VolumeEstimate> {
    let volume: f64 = (0..3).map(|a| bbox.hi[a] - bbox.lo[a]).product();
    if !(volume > 0.0) {
        return Err(Error::InvalidArgument("bounding box has no volume".into()));
    }
    let mut rng = candidate_rng(seed, VOLUME_STREAM);
    let accepted = (0..cfg.volume_samples)
        .filter(|_| {
            let p = sample_position(&mut rng, bbox);
            let (r, _) = sample_orientation(&mut rng, cfg);
            validate_position(map, &p, &r, cfg)
        })
        .count();
    Ok(VolumeEstimate {
        bbox_volume: volume,
        accepted,
        samples: cfg.volume_samples,
        effective_volume: volume * accepted as f64 / cfg.volume_samples as f64,
    })
}

/// Number of images for an effective volume.
pub fn image_budget(effective_volume: f64, cfg: &PhotographerConfig) -> usize {
    (effective_volume * cfg.images_per_m3).round() as usize
}

/// Accepted poses and their renders.
#[derive(Debug, Clone)]
pub struct PhotographResult {
    pub frames: Vec<RenderedFrame>,
    pub volume: VolumeEstimate,
    pub requested: usize,
    pub attempts: usize,
}

/// Scene-bound photographer.
pub struct Photographer<'a> {
    pub scene: &'a Scene,
    pub map: &'a VoxelMap,
    pub cfg: PhotographerConfig,
    pub intrinsics: CameraIntrinsics,
    pub max_range: f64,
}

impl Photographer<'_> {
    /// Candidate pose `k` of a seed; independent of all other candidates.
    pub fn candidate(&self, seed: u64, k: u64) -> (Vec3, Mat3) {
        let mut rng = candidate_rng(seed, k);
        let p = sample_position(&mut rng, &self.scene.bounds());
        let (r, _) = sample_orientation(&mut rng, &self.cfg);
        (p, r)
    }

    /// Valid poses in candidate order, up to `count`.
    pub fn poses(&self, seed: u64, count: usize) -> (Vec<Pose>, usize) {
        let limit = count.saturating_mul(self.cfg.attempts_per_image).max(1);
        let mut out = Vec::with_capacity(count);
        let mut k = 0usize;
        while out.len() < count && k < limit {
            let (p, r) = self.candidate(seed, k as u64);
            if validate_position(self.map, &p, &r, &self.cfg) {
                out.push(Pose::new(r, p).expect("sampled rotation is orthonormal"));
            }
            k += 1;
        }
        (out, k)
    }

    pub fn run(&self, seed: u64) -> Result<PhotographResult> {
        self.cfg.validate()?;
        let volume = estimate_effective_volume(self.map, &self.scene.bounds(), &self.cfg, seed)?;
        let requested = self
            .cfg
            .image_count
            .unwrap_or_else(|| image_budget(volume.effective_volume, &self.cfg));
        if requested == 0 {
            warn!("effective volume is zero; no images taken");
        }
        let (poses, attempts) = self.poses(seed, requested);
        if poses.len() < requested {
            warn!(
                "only {} of {} valid poses found after {} attempts",
                poses.len(),
                requested,
                attempts
            );
        }
        let renderer = Renderer::new(self.scene)
            .with_supersampling(self.cfg.supersampling)
            .with_psf(self.cfg.psf_sigma);
        let frames = poses
            .par_iter()
            .enumerate()
            .map(|(i, pose)| renderer.render(i, pose, &self.intrinsics, self.max_range))
            .collect();
        Ok(PhotographResult {
            frames,
            volume,
            requested,
            attempts,
        })
    }
}

/// Convenience wrapper over [`Photographer::run`].
pub fn photograph(
    scene: &Scene,
    map: &VoxelMap,
    cfg: &PhotographerConfig,
    intrinsics: &CameraIntrinsics,
    max_range: f64,
    seed: u64,
) -> Result<PhotographResult> {
    Photographer {
        scene,
        map,
        cfg: cfg.clone(),
        intrinsics: *intrinsics,
        max_range,
    }
    .run(seed)
}

#[cfg(test)]
mod tests {
    use super::super::{build_scene, SceneSpec};
    use super::*;
    use crate::voxelmap::voxelize_mesh;

    fn empty_room(res: f64) -> (Scene, VoxelMap) {
        let s = build_scene(&SceneSpec {
            box_count: 0,
            ..Default::default()
        })
        .unwrap();
        let m = voxelize_mesh(&s.mesh, res).unwrap();
        (s, m)
    }

    #[test]
    fn zero_angles_look_along_x() {
        let r = rotation_from_angles(0.0, 0.0, 0.0);
        assert!((r * Vec3::z() - Vec3::x()).norm() < 1e-15);
        let up = rotation_from_angles(0.7, 0.3, 0.9) * Vec3::z();
        assert!((up.z - 0.3f64.sin()).abs() < 1e-12);
        let det = r.determinant();
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orientation_statistics() {
        let cfg = PhotographerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut pitch = Vec::with_capacity(n);
        let mut yaw_bins = [0usize; 20];
        for _ in 0..n {
            let (r, [yaw, p, _]) = sample_orientation(&mut rng, &cfg);
            // The sampled pitch is recoverable as the view-ray elevation.
            if pitch.len() < 1000 {
                let fwd = r * Vec3::z();
                assert!(
                    (fwd.z.asin()
                        - p.clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2))
                    .abs()
                        < 1e-9
                        || p.abs() > std::f64::consts::FRAC_PI_2
                );
            }
            pitch.push(p);
            yaw_bins[((yaw / std::f64::consts::TAU) * 20.0) as usize] += 1;
        }
        let mean = pitch.iter().sum::<f64>() / n as f64;
        let sd = (pitch.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 0.01);
        assert!((sd / cfg.pitch_sigma - 1.0).abs() < 0.03);
        let expected = n as f64 / 20.0;
        let chi2: f64 = yaw_bins
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // 99th percentile of chi-square with 19 degrees of freedom.
        assert!(chi2 < 36.19, "chi2 = {chi2}");
    }

    #[test]
    fn seeded_orientations_repeat() {
        let cfg = PhotographerConfig::default();
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            (0..5)
                .map(|_| sample_orientation(&mut rng, &cfg).1)
                .collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            (0..5)
                .map(|_| sample_orientation(&mut rng, &cfg).1)
                .collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn validity_cases() {
        let (_, map) = empty_room(0.05);
        let cfg = PhotographerConfig::default();
        let level = rotation_from_angles(0.0, 0.0, 0.0);
        assert!(validate_position(
            &map,
            &Vec3::new(2.0, 2.0, 2.0),
            &level,
            &cfg
        ));
        assert!(!validate_position(
            &map,
            &Vec3::new(0.4, 2.0, 2.0),
            &level,
            &cfg
        ));
        assert!(!validate_position(
            &map,
            &Vec3::new(-1.0, 2.0, 2.0),
            &level,
            &cfg
        ));
        // The 5 m vertical bound rejects tall rooms.
        let tall = build_scene(&SceneSpec {
            box_count: 0,
            room_size: [4.0, 4.0, 12.0],
            ..Default::default()
        })
        .unwrap();
        let tall_map = voxelize_mesh(&tall.mesh, 0.05).unwrap();
        assert!(!validate_position(
            &tall_map,
            &Vec3::new(2.0, 2.0, 6.0),
            &level,
            &cfg
        ));
    }

    #[test]
    fn effective_volume_matches_free_interior() {
        let res = 0.02;
        let (s, map) = empty_room(res);
        let cfg = PhotographerConfig {
            volume_samples: 20_000,
            ..Default::default()
        };
        let est = estimate_effective_volume(&map, &s.bounds(), &cfg, 5).unwrap();
        // Valid positions are the cube shrunk by the lower bound plus the
        // one-cell wall thickening on every side.
        let inner = 4.0 - 2.0 * (0.6 + res);
        let want = (inner / 4.0f64).powi(3);
        let sd = (want * (1.0 - want) / cfg.volume_samples as f64).sqrt();
        assert!(
            (est.ratio() - want).abs() < 4.0 * sd,
            "ratio {} vs {want}",
            est.ratio()
        );
        assert_eq!(image_budget(60.0, &cfg), 600);
    }

    #[test]
    fn photograph_budget_and_validity() {
        let (s, map) = empty_room(0.05);
        let intr = CameraIntrinsics::new(20.0, 20.0, 15.5, 11.5, 32, 24).unwrap();
        let cfg = PhotographerConfig::default();
        let out = photograph(&s, &map, &cfg, &intr, 20.0, 8).unwrap();
        assert_eq!(
            out.requested,
            image_budget(out.volume.effective_volume, &cfg)
        );
        assert_eq!(out.frames.len(), out.requested);
        for f in &out.frames {
            let r = f.pose.rotation();
            assert!(validate_position(&map, f.pose.translation(), r, &cfg));
        }
        let again = photograph(&s, &map, &cfg, &intr, 20.0, 8).unwrap();
        assert!(out
            .frames
            .iter()
            .zip(&again.frames)
            .all(|(a, b)| a.image == b.image && a.depth == b.depth));
    }

    #[test]
    fn degenerate_scene_yields_nothing() {
        // A room too small for the lower bound.
        let s = build_scene(&SceneSpec {
            box_count: 0,
            room_size: [1.0, 1.0, 1.0],
            ..Default::default()
        })
        .unwrap();
        let map = voxelize_mesh(&s.mesh, 0.05).unwrap();
        let intr = CameraIntrinsics::new(20.0, 20.0, 15.5, 11.5, 32, 24).unwrap();
        let out = photograph(&s, &map, &PhotographerConfig::default(), &intr, 20.0, 1).unwrap();
        assert_eq!(out.volume.accepted, 0);
        assert!(out.frames.is_empty());
    }
}
