//! Brute-force ray/triangle renderer producing an 8-bit image and exact
//! depth.

use rayon::prelude::*;

use super::{checker_factor, Scene};
use crate::geometry::{CameraIntrinsics, DepthMap, Pose, Vec3};
use crate::imageproc::gaussian_blur;
use crate::raster::{GrayImage, ScoreGrid};

/// Fraction of the shade a face shows with no direct light.
pub const AMBIENT: f64 = 0.3;

/// Direction towards the light (normalized at use).
pub const LIGHT_DIRECTION: [f64; 3] = [0.48, -0.36, 0.8];

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub index: usize,
    pub image: GrayImage,
    /// Camera-frame z of the first surface; 0 where nothing is hit.
    pub depth: DepthMap,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy)]
struct Tri {
    v0: Vec3,
    e1: Vec3,
    e2: Vec3,
    face: usize,
}

/// Precomputed triangle data of a scene.
#[derive(Debug, Clone)]
pub struct Renderer<'a> {
    scene: &'a Scene,
    tris: Vec<Tri>,
    light: Vec3,
    supersampling: usize,
    psf_sigma: f64,
}

impl<'a> Renderer<'a> {
    pub fn new(scene: &'a Scene) -> Self {
        let tris = (0..scene.mesh.triangles.len())
            .map(|i| {
                let [a, b, c] = scene.mesh.triangle(i);
                Tri {
                    v0: a,
                    e1: b - a,
                    e2: c - a,
                    face: scene.triangle_faces[i],
                }
            })
            .collect();
        Self {
            scene,
            tris,
            light: Vec3::from(LIGHT_DIRECTION).normalize(),
            supersampling: 1,
            psf_sigma: 0.0,
        }
    }

    /// Averages `n × n` sub-pixel rays per pixel for the image; depth always
    /// comes from the pixel-center ray.
    pub fn with_supersampling(mut self, n: usize) -> Self {
        self.supersampling = n.max(1);
        self
    }

    /// Gaussian point-spread blur of the image in pixels; 0 disables it.
    pub fn with_psf(mut self, sigma: f64) -> Self {
        self.psf_sigma = sigma.max(0.0);
        self
    }

    fn radiance(&self, origin: &Vec3, d: &Vec3, max_range: f64) -> Option<(f64, f64)> {
        let (t, face) = self.intersect(origin, d, 1e-9)?;
        (t * d.norm() <= max_range).then(|| (t, self.shade_at(face, &(origin + d * t))))
    }

    /// Nearest hit `(t, face)` along `origin + t·dir` with `t > t_min`.
    /// Edges count as inside so shared diagonals leave no cracks.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for tri in &self.tris {
            let p = dir.cross(&tri.e2);
            let det = tri.e1.dot(&p);
            if det.abs() < 1e-14 {
                continue;
            }
            let inv = 1.0 / det;
            let s = origin - tri.v0;
            let u = s.dot(&p) * inv;
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let q = s.cross(&tri.e1);
            let v = dir.dot(&q) * inv;
            if v < 0.0 || u + v > 1.0 {
                continue;
            }
            let t = tri.e2.dot(&q) * inv;
            if t > t_min && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, tri.face));
            }
        }
        best
    }

    /// Whether `point` is unoccluded from `eye`.
    pub fn visible(&self, eye: &Vec3, point: &Vec3) -> bool {
        let dir = point - eye;
        match self.intersect(eye, &dir, 1e-9) {
            Some((t, _)) => t >= 1.0 - 1e-5,
            None => true,
        }
    }

    pub fn shade_at(&self, face: usize, p: &Vec3) -> f64 {
        let f = &self.scene.faces[face];
        let mut n = Vec3::zeros();
        n[f.axis] = f.sign;
        let lambert = AMBIENT + (1.0 - AMBIENT) * n.dot(&self.light).max(0.0);
        f.material.shade * lambert * checker_factor(&f.material, f.axis, p)
    }

    fn finish(&self, radiance: Vec<f64>, depth: &[f32], w: usize, h: usize) -> GrayImage {
        let mut grid = ScoreGrid::from_vec(w, h, radiance).expect("dimensions match");
        if self.psf_sigma > 0.0 {
            grid = gaussian_blur(&grid, self.psf_sigma).expect("positive sigma");
        }
        // Misses stay black whatever the blur spread into them.
        GrayImage::from_fn(w, h, |x, y| {
            let i = y * w + x;
            if depth[i] > 0.0 {
                (grid.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
    }

    pub fn render(
        &self,
        index: usize,
        pose: &Pose,
        intr: &CameraIntrinsics,
        max_range: f64,
    ) -> RenderedFrame {
        let (w, h) = intr.dims();
        let mut pixels = vec![0f64; w * h];
        let mut depth = vec![0f32; w * h];
        let origin = *pose.translation();
        pixels
            .par_chunks_mut(w)
            .zip(depth.par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, (prow, drow))| {
                let n = self.supersampling;
                for x in 0..w {
                    // Camera-frame z of this direction is exactly 1, so the
                    // ray parameter is the depth.
                    let d = pose.rotation() * intr.normalized(x as f64, y as f64);
                    let center = self.radiance(&origin, &d, max_range);
                    if let Some((t, _)) = center {
                        drow[x] = t as f32;
                    }
                    let v = if center.is_none() {
                        0.0
                    } else if n == 1 {
                        center.map_or(0.0, |(_, v)| v)
                    } else {
                        let mut acc = 0.0;
                        for sy in 0..n {
                            for sx in 0..n {
                                let ox = (sx as f64 + 0.5) / n as f64 - 0.5;
                                let oy = (sy as f64 + 0.5) / n as f64 - 0.5;
                                let ds =
                                    pose.rotation() * intr.normalized(x as f64 + ox, y as f64 + oy);
                                acc += self
                                    .radiance(&origin, &ds, max_range)
                                    .map_or(0.0, |(_, v)| v);
                            }
                        }
                        acc / (n * n) as f64
                    };
                    prow[x] = v;
                }
            });
        RenderedFrame {
            index,
            image: self.finish(pixels, &depth, w, h),
            depth: DepthMap::new(w, h, depth).expect("finite nonnegative depth"),
            pose: *pose,
            intrinsics: *intr,
        }
    }
}

/// Renders one frame of a scene.
pub fn render_frame(
    scene: &Scene,
    index: usize,
    pose: &Pose,
    intr: &CameraIntrinsics,
    max_range: f64,
) -> RenderedFrame {
    Renderer::new(scene).render(index, pose, intr, max_range)
}
