//! Procedural indoor scenes with known corners, a raycast renderer, and the
//! random-view photographer.
//!
//! World frame is z-up. A scene is an axis-aligned room `[0, size]` seen
//! from inside plus axis-aligned boxes standing on the floor. Faces carry a
//! flat shade and optionally a checkerboard.

mod photographer;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;

pub use photographer::{
    estimate_effective_volume, image_budget, photograph, sample_orientation, validate_position,
    PhotographResult, Photographer, PhotographerConfig, VolumeEstimate,
};
pub use render::{render_frame, RenderedFrame, Renderer, AMBIENT, LIGHT_DIRECTION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Room extents along x, y, z in meters.
    pub room_size: [f64; 3],
    pub box_count: usize,
    /// Smallest box extents.
    pub box_min: [f64; 3],
    /// Largest box extents.
    pub box_max: [f64; 3],
    /// Gap kept between boxes and between boxes and walls.
    pub box_clearance: f64,
    /// Probability that a face gets a checkerboard.
    pub checker_probability: f64,
    /// Checkerboard period range in meters (one square edge).
    pub checker_period: [f64; 2],
    pub placement_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            room_size: [4.0, 4.0, 4.0],
            box_count: 3,
            box_min: [0.3, 0.3, 0.3],
            box_max: [0.8, 0.8, 1.0],
            box_clearance: 0.3,
            checker_probability: 0.0,
            checker_period: [0.2, 0.4],
            placement_attempts: 1000,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("scene: {m}")));
        for a in 0..3 {
            if !(self.room_size[a] > 0.0) || !self.room_size[a].is_finite() {
                return bad(format!(
                    "room extent {} must be positive",
                    self.room_size[a]
                ));
            }
            if !(self.box_min[a] > 0.0 && self.box_min[a] <= self.box_max[a]) {
                return bad("need 0 < box_min <= box_max on every axis".into());
            }
            if self.box_max[a] + 2.0 * self.box_clearance.max(0.0) > self.room_size[a]
                && self.box_count > 0
            {
                return bad("boxes do not fit in the room".into());
            }
        }
        if !(0.0..=1.0).contains(&self.checker_probability) {
            return bad("checker_probability must lie in [0, 1]".into());
        }
        if !(self.checker_period[0] > 0.0 && self.checker_period[0] <= self.checker_period[1]) {
            return bad("checker_period must be an increasing positive range".into());
        }
        Ok(())
    }
}

/// Surface appearance of one face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub shade: f64,
    /// Checker square edge in meters.
    pub checker: Option<f64>,
}

/// Axis-aligned cuboid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Cuboid {
    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if i & 1 == 0 { self.lo[0] } else { self.hi[0] },
                if i & 2 == 0 { self.lo[1] } else { self.hi[1] },
                if i & 4 == 0 { self.lo[2] } else { self.hi[2] },
            );
        }
        out
    }

    fn overlaps(&self, other: &Cuboid, gap: f64) -> bool {
        (0..3).all(|a| self.lo[a] < other.hi[a] + gap && other.lo[a] < self.hi[a] + gap)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }
}

/// An axis-aligned rectangular face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Face {
    /// Constant axis of the face plane.
    pub axis: usize,
    pub offset: f64,
    /// Normal sign along `axis` (direction the visible side faces).
    pub sign: f64,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub material: Material,
}

impl Face {
    fn in_plane_axes(&self) -> (usize, usize) {
        ((self.axis + 1) % 3, (self.axis + 2) % 3)
    }

    /// Checkerboard grid points inside the face, plus the points where grid
    /// lines meet the face border.
    fn junctions(&self) -> Vec<Vec3> {
        let Some(period) = self.material.checker else {
            return Vec::new();
        };
        let (u, v) = self.in_plane_axes();
        let ticks = |a: usize| {
            let first = (self.lo[a] / period).floor() as i64 + 1;
            let last = (self.hi[a] / period).ceil() as i64 - 1;
            (first..=last)
                .map(|k| k as f64 * period)
                .filter(|&x| x > self.lo[a] + 1e-9 && x < self.hi[a] - 1e-9)
                .collect::<Vec<_>>()
        };
        let (us, vs) = (ticks(u), ticks(v));
        let point = |a: f64, b: f64| {
            let mut p = Vec3::zeros();
            p[self.axis] = self.offset;
            p[u] = a;
            p[v] = b;
            p
        };
        let mut out = Vec::new();
        for &a in &us {
            for &b in &vs {
                out.push(point(a, b));
            }
            out.push(point(a, self.lo[v]));
            out.push(point(a, self.hi[v]));
        }
        for &b in &vs {
            out.push(point(self.lo[u], b));
            out.push(point(self.hi[u], b));
        }
        out
    }
}

/// Texture factor at a world point on a face: 1 on light squares, 0.5 on
/// dark ones.
pub fn checker_factor(material: &Material, axis: usize, p: &Vec3) -> f64 {
    match material.checker {
        None => 1.0,
        Some(period) => {
            let u = (axis + 1) % 3;
            let v = (axis + 2) % 3;
            let parity = (p[u] / period).floor() as i64 + (p[v] / period).floor() as i64;
            if parity.rem_euclid(2) == 0 {
                1.0
            } else {
                0.5
            }
        }
    }
}

/// A built scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub mesh: TriangleMesh,
    /// Face of each triangle.
    pub triangle_faces: Vec<usize>,
    pub faces: Vec<Face>,
    pub room: Cuboid,
    pub boxes: Vec<Cuboid>,
}

impl Scene {
    /// The eight corners of the room and of every box.
    pub fn corners(&self) -> Vec<Vec3> {
        std::iter::once(&self.room)
            .chain(&self.boxes)
            .flat_map(|c| c.corners())
            .collect()
    }

    /// Checkerboard grid points on textured faces.
    pub fn junctions(&self) -> Vec<Vec3> {
        self.faces.iter().flat_map(|f| f.junctions()).collect()
    }

    pub fn bounds(&self) -> Cuboid {
        self.room
    }
}

fn push_face(
    verts: &mut Vec<Vec3>,
    tris: &mut Vec<[u32; 3]>,
    faces: &mut Vec<Face>,
    tri_faces: &mut Vec<usize>,
    cuboid: &Cuboid,
    axis: usize,
    high: bool,
    inward: bool,
    material: Material,
) {
    let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
    let offset = if high {
        cuboid.hi[axis]
    } else {
        cuboid.lo[axis]
    };
    let corner = |a: f64, b: f64| {
        let mut p = Vec3::zeros();
        p[axis] = offset;
        p[u] = a;
        p[v] = b;
        p
    };
    let base = verts.len() as u32;
    verts.push(corner(cuboid.lo[u], cuboid.lo[v]));
    verts.push(corner(cuboid.hi[u], cuboid.lo[v]));
    verts.push(corner(cuboid.hi[u], cuboid.hi[v]));
    verts.push(corner(cuboid.lo[u], cuboid.hi[v]));
    // (u, v, axis) is right-handed, so counter-clockwise in (u, v) faces +axis.
    let outward = if high { 1.0 } else { -1.0 };
    let sign = if inward { -outward } else { outward };
    if sign > 0.0 {
        tris.push([base, base + 1, base + 2]);
        tris.push([base, base + 2, base + 3]);
    } else {
        tris.push([base, base + 2, base + 1]);
        tris.push([base, base + 3, base + 2]);
    }
    let mut lo = cuboid.lo;
    let mut hi = cuboid.hi;
    lo[axis] = offset;
    hi[axis] = offset;
    faces.push(Face {
        axis,
        offset,
        sign,
        lo,
        hi,
        material,
    });
    tri_faces.push(faces.len() - 1);
    tri_faces.push(faces.len() - 1);
}

/// Room shell plus boxes; deterministic in `spec.seed`.
pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let room = Cuboid {
        lo: [0.0; 3],
        hi: spec.room_size,
    };
    let gap = spec.box_clearance.max(0.0);
    let mut boxes: Vec<Cuboid> = Vec::with_capacity(spec.box_count);
    for index in 0..spec.box_count {
        let mut placed = None;
        for _ in 0..spec.placement_attempts.max(1) {
            let size: [f64; 3] =
                std::array::from_fn(|a| rng.random_range(spec.box_min[a]..=spec.box_max[a]));
            let x = rng.random_range(gap..=(spec.room_size[0] - gap - size[0]));
            let y = rng.random_range(gap..=(spec.room_size[1] - gap - size[1]));
            let candidate = Cuboid {
                lo: [x, y, 0.0],
                hi: [x + size[0], y + size[1], size[2]],
            };
            if boxes.iter().all(|b| !b.overlaps(&candidate, gap)) {
                placed = Some(candidate);
                break;
            }
        }
        boxes.push(placed.ok_or(Error::PlacementFailed {
            index,
            attempts: spec.placement_attempts,
        })?);
    }

    let mut material = || Material {
        shade: rng.random_range(0.35..=0.95),
        checker: rng
            .random_bool(spec.checker_probability)
            .then(|| rng.random_range(spec.checker_period[0]..=spec.checker_period[1])),
    };
    let (mut verts, mut tris, mut faces, mut tri_faces) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for axis in 0..3 {
        for high in [false, true] {
            let m = material();
            push_face(
                &mut verts,
                &mut tris,
                &mut faces,
                &mut tri_faces,
                &room,
                axis,
                high,
                true,
                m,
            );
        }
    }
    for b in &boxes {
        for axis in 0..3 {
            for high in [false, true] {
                let m = material();
                // The bottom face rests on the floor and is never seen.
                if axis == 2 && !high {
                    continue;
                }
                push_face(
                    &mut verts,
                    &mut tris,
                    &mut faces,
                    &mut tri_faces,
                    b,
                    axis,
                    high,
                    false,
                    m,
                );
            }
        }
    }
    let shades = tri_faces
        .iter()
        .map(|&f: &usize| faces[f].material.shade)
        .collect();
    let mesh = TriangleMesh::new(verts, tris, Some(shades))?;
    debug_assert_eq!(mesh.triangles.len(), tri_faces.len());
    Ok(Scene {
        spec: spec.clone(),
        mesh,
        triangle_faces: tri_faces,
        faces,
        room,
        boxes,
    })
}
