//! Sparse voxel occupancy map carrying painted detection scores and view
//! counts.
//!
//! Cells are addressed by integer coordinates `floor(p / resolution)`; the
//! grid origin is the world origin. The occupied set is fixed at
//! construction (voxelization); only the per-cell accumulators change
//! afterwards, via atomic integer additions, so painting and visibility
//! passes can run frame-parallel and still produce bitwise-identical maps.

mod snapshot;
mod traverse;
mod voxelize;

use std::collections::HashMap;
use std::sync::atomic::{AtomicI64, AtomicU32, Ordering};

use rayon::prelude::*;

use crate::detectors::DetectionSet;
use crate::geometry::{pixel_ray, CameraIntrinsics, Pose, Ray, Vec3};

pub use voxelize::{triangle_box_overlap, voxelize_mesh};

/// Coordinates must lie in `[-COORD_LIMIT, COORD_LIMIT)` on every axis.
pub const COORD_LIMIT: i32 = 1 << 20;
const COORD_MASK: u64 = (1 << 21) - 1;

/// Fixed-point scale of the score accumulator: one unit is 1e-9 confidence.
pub const SCORE_UNITS: f64 = 1e9;

/// Default ray length, matching the largest room bound used by the
/// photographer.
pub const DEFAULT_MAX_RANGE: f64 = 20.0;

/// Edge length of an acceleration brick, in cells.
const BRICK: i32 = 8;
/// Above this many bricks the brick index switches from dense to hashed.
const DENSE_BRICK_LIMIT: usize = 1 << 24;

/// Packs a cell coordinate into 21 bits per axis (biased, x highest).
pub fn pack(c: [i32; 3]) -> u64 {
    let b = |v: i32| ((v as i64 + COORD_LIMIT as i64) as u64) & COORD_MASK;
    (b(c[0]) << 42) | (b(c[1]) << 21) | b(c[2])
}

pub fn unpack(key: u64) -> [i32; 3] {
    let u = |v: u64| (v & COORD_MASK) as i64 as i32 - COORD_LIMIT;
    [u(key >> 42), u(key >> 21), u(key)]
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First occupied cell along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelHit {
    pub cell: [i32; 3],
    /// Distance along the ray at which it enters the cell, in meters (≥ 0).
    pub distance: f64,
}

/// Accumulator values of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CellValue {
    /// Painted confidence in units of 1e-9.
    pub score_units: i64,
    pub views: u32,
}

impl CellValue {
    pub fn score(&self) -> f64 {
        self.score_units as f64 / SCORE_UNITS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PaintStats {
    pub painted: usize,
    pub missed: usize,
}

impl std::ops::AddAssign for PaintStats {
    fn add_assign(&mut self, o: Self) {
        self.painted += o.painted;
        self.missed += o.missed;
    }
}

/// 512-bit occupancy mask of one brick, bit `(z*8 + y)*8 + x` in local
/// coordinates.
type BrickMask = [u64; 8];

#[derive(Debug)]
enum BrickIndex {
    Dense(Vec<u32>),
    Sparse(HashMap<u64, u32>),
}

#[derive(Debug)]
struct Bricks {
    /// Lowest occupied cell coordinate; brick (0,0,0) starts here.
    lo: [i32; 3],
    /// Highest occupied cell coordinate (inclusive).
    hi: [i32; 3],
    dims: [i32; 3],
    index: BrickIndex,
    masks: Vec<BrickMask>,
}

impl Bricks {
    fn build(keys: &[u64], dense_limit: usize) -> Self {
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for &k in keys {
            let c = unpack(k);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        if keys.is_empty() {
            lo = [0; 3];
            hi = [-1; 3];
        }
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a] + 1).max(0) + BRICK - 1) / BRICK);
        let total = dims.iter().map(|&d| d as usize).product::<usize>();
        let mut bricks = Bricks {
            lo,
            hi,
            dims,
            index: if total <= dense_limit {
                BrickIndex::Dense(vec![u32::MAX; total])
            } else {
                BrickIndex::Sparse(HashMap::new())
            },
            masks: Vec::new(),
        };
        for &k in keys {
            let c = unpack(k);
            let rel = [0, 1, 2].map(|a| c[a] - lo[a]);
            let b = rel.map(|r| r / BRICK);
            let local = rel.map(|r| r % BRICK);
            let slot = bricks.slot_or_insert(b);
            let bit = ((local[2] * BRICK + local[1]) * BRICK + local[0]) as usize;
            bricks.masks[slot][bit >> 6] |= 1 << (bit & 63);
        }
        bricks
    }

    fn linear(&self, b: [i32; 3]) -> usize {
        ((b[2] as usize * self.dims[1] as usize) + b[1] as usize) * self.dims[0] as usize
            + b[0] as usize
    }

    fn slot_or_insert(&mut self, b: [i32; 3]) -> usize {
        let next = self.masks.len() as u32;
        let lin = self.linear(b);
        let slot = match &mut self.index {
            BrickIndex::Dense(v) => {
                if v[lin] == u32::MAX {
                    v[lin] = next;
                }
                v[lin]
            }
            BrickIndex::Sparse(m) => *m.entry(lin as u64).or_insert(next),
        };
        if slot == next {
            self.masks.push([0; 8]);
        }
        slot as usize
    }

    fn mask(&self, b: [i32; 3]) -> Option<&BrickMask> {
        let lin = self.linear(b);
        let slot = match &self.index {
            BrickIndex::Dense(v) => v[lin],
            BrickIndex::Sparse(m) => *m.get(&(lin as u64))?,
        };
        (slot != u32::MAX).then(|| &self.masks[slot as usize])
    }
}

/// The painted occupancy map.
#[derive(Debug)]
pub struct VoxelMap {
    resolution: f64,
    /// Occupied cells, sorted; a cell's id is its position here.
    keys: Vec<u64>,
    scores: Vec<AtomicI64>,
    views: Vec<AtomicU32>,
    /// Open-addressed table of `id + 1` (0 = empty), linear probing.
    table: Vec<u32>,
    bricks: Bricks,
}

impl VoxelMap {
    pub(crate) fn from_sorted_keys(resolution: f64, keys: Vec<u64>) -> Self {
        Self::with_brick_limit(resolution, keys, DENSE_BRICK_LIMIT)
    }

    fn with_brick_limit(resolution: f64, keys: Vec<u64>, dense_limit: usize) -> Self {
        debug_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let cap = (keys.len() * 2).next_power_of_two().max(16);
        let mut table = vec![0u32; cap];
        for (id, &k) in keys.iter().enumerate() {
            let mut s = splitmix64(k) as usize & (cap - 1);
            while table[s] != 0 {
                s = (s + 1) & (cap - 1);
            }
            table[s] = id as u32 + 1;
        }
        let bricks = Bricks::build(&keys, dense_limit);
        Self {
            resolution,
            scores: keys.iter().map(|_| AtomicI64::new(0)).collect(),
            views: keys.iter().map(|_| AtomicU32::new(0)).collect(),
            keys,
            table,
            bricks,
        }
    }

    /// Builds a map with the given occupied cells and zero accumulators.
    pub fn from_cells(
        resolution: f64,
        cells: impl IntoIterator<Item = [i32; 3]>,
    ) -> crate::Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(crate::Error::InvalidArgument(format!(
                "voxel resolution must be positive, got {resolution}"
            )));
        }
        let mut keys = Vec::new();
        for c in cells {
            if c.iter().any(|&v| !(-COORD_LIMIT..COORD_LIMIT).contains(&v)) {
                return Err(crate::Error::InvalidArgument(format!(
                    "cell {c:?} outside addressable range"
                )));
            }
            keys.push(pack(c));
        }
        keys.sort_unstable();
        keys.dedup();
        Ok(Self::from_sorted_keys(resolution, keys))
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// World position of cell (0,0,0)'s minimum corner; always the origin.
    pub fn origin(&self) -> Vec3 {
        Vec3::zeros()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Packed keys of all occupied cells, ascending.
    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn cell_of(&self, p: &Vec3) -> [i32; 3] {
        [p.x, p.y, p.z].map(|v| (v / self.resolution).floor() as i32)
    }

    fn id_of_key(&self, key: u64) -> Option<usize> {
        let mask = self.table.len() - 1;
        let mut s = splitmix64(key) as usize & mask;
        loop {
            match self.table[s] {
                0 => return None,
                id if self.keys[id as usize - 1] == key => return Some(id as usize - 1),
                _ => s = (s + 1) & mask,
            }
        }
    }

    fn id_of(&self, c: [i32; 3]) -> Option<usize> {
        if c.iter().any(|&v| !(-COORD_LIMIT..COORD_LIMIT).contains(&v)) {
            return None;
        }
        self.id_of_key(pack(c))
    }

    pub fn is_occupied(&self, c: [i32; 3]) -> bool {
        self.id_of(c).is_some()
    }

    fn value_at(&self, id: usize) -> CellValue {
        CellValue {
            score_units: self.scores[id].load(Ordering::Relaxed),
            views: self.views[id].load(Ordering::Relaxed),
        }
    }

    /// Accumulators of an occupied cell.
    pub fn cell(&self, c: [i32; 3]) -> Option<CellValue> {
        self.id_of(c).map(|id| self.value_at(id))
    }

    /// All cells with their accumulators, in key order.
    pub fn cells(&self) -> impl Iterator<Item = ([i32; 3], CellValue)> + '_ {
        (0..self.keys.len()).map(|id| (unpack(self.keys[id]), self.value_at(id)))
    }

    pub fn total_score_units(&self) -> i64 {
        self.scores.iter().map(|s| s.load(Ordering::Relaxed)).sum()
    }

    pub fn total_score(&self) -> f64 {
        self.total_score_units() as f64 / SCORE_UNITS
    }

    /// Clears scores and view counts, keeping occupancy.
    pub fn reset(&mut self) {
        for s in &mut self.scores {
            *s.get_mut() = 0;
        }
        for v in &mut self.views {
            *v.get_mut() = 0;
        }
    }

    /// First occupied cell along `ray` whose entry distance is within
    /// `max_range` meters.
    pub fn raycast(&self, ray: &Ray, max_range: f64) -> Option<VoxelHit> {
        self.raycast_id(ray, max_range).map(|(id, t)| VoxelHit {
            cell: unpack(self.keys[id]),
            distance: t,
        })
    }

    /// Accumulators of the first cell hit.
    pub fn query(&self, ray: &Ray, max_range: f64) -> Option<(f64, u32)> {
        self.raycast_id(ray, max_range).map(|(id, _)| {
            let v = self.value_at(id);
            (v.score(), v.views)
        })
    }

    /// Paints one frame-detector set: each detection's confidence is added
    /// to the first cell its pixel ray hits.
    ///
    /// Confidences are converted to fixed point by cumulative rounding, so a
    /// set whose confidences sum to one adds exactly 10⁹ units when every
    /// ray hits.
    pub fn paint_frame(
        &self,
        intr: &CameraIntrinsics,
        pose: &Pose,
        set: &DetectionSet,
        max_range: f64,
    ) -> PaintStats {
        let units = quantize_confidences(set.detections.iter().map(|d| d.confidence));
        let hits: Vec<Option<(usize, i64)>> = set
            .detections
            .par_iter()
            .zip(units.par_iter())
            .map(|(d, &u)| {
                let ray = pixel_ray((d.x as f64, d.y as f64), intr, pose);
                self.raycast_id(&ray, max_range).map(|(id, _)| (id, u))
            })
            .collect();
        let mut stats = PaintStats::default();
        for h in hits {
            match h {
                Some((id, u)) => {
                    self.scores[id].fetch_add(u, Ordering::Relaxed);
                    stats.painted += 1;
                }
                None => stats.missed += 1,
            }
        }
        stats
    }

    /// Raycasts every `stride`-th pixel in both axes and increments the view
    /// count of each distinct cell hit by exactly one. Returns the number of
    /// distinct cells.
    pub fn visibility_pass(
        &self,
        intr: &CameraIntrinsics,
        pose: &Pose,
        max_range: f64,
        stride: usize,
    ) -> usize {
        let stride = stride.max(1);
        let mut ids: Vec<usize> = (0..intr.height)
            .into_par_iter()
            .step_by(stride)
            .flat_map_iter(|y| {
                (0..intr.width).step_by(stride).filter_map(move |x| {
                    let ray = pixel_ray((x as f64, y as f64), intr, pose);
                    self.raycast_id(&ray, max_range).map(|(id, _)| id)
                })
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        for &id in &ids {
            self.views[id].fetch_add(1, Ordering::Relaxed);
        }
        ids.len()
    }
}

/// Fixed-point units for a sequence of nonnegative confidences via
/// cumulative rounding: unit totals equal the rounded running sum.
/// Non-finite or negative confidences contribute zero.
pub fn quantize_confidences(conf: impl Iterator<Item = f64>) -> Vec<i64> {
    let mut acc = 0.0f64;
    let mut prev = 0i64;
    conf.map(|c| {
        if c.is_finite() && c > 0.0 {
            acc += c;
        }
        let cur = (acc * SCORE_UNITS).round() as i64;
        let u = cur - prev;
        prev = cur;
        u
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Detection;
    use proptest::prelude::*;

    #[test]
    fn pack_roundtrip_extremes() {
        for c in [[0, 0, 0], [-1, 2, -3], [COORD_LIMIT - 1, -COORD_LIMIT, 7]] {
            assert_eq!(unpack(pack(c)), c);
        }
        // Key order follows x, then y, then z.
        assert!(pack([-1, 5, 5]) < pack([0, -5, -5]));
    }

    proptest! {
        #[test]
        fn pack_is_bijective(x in -COORD_LIMIT..COORD_LIMIT, y in -COORD_LIMIT..COORD_LIMIT, z in -COORD_LIMIT..COORD_LIMIT) {
            prop_assert_eq!(unpack(pack([x, y, z])), [x, y, z]);
        }

        #[test]
        fn quantization_conserves_mass(n in 1usize..400) {
            let u = quantize_confidences(std::iter::repeat_n(1.0 / n as f64, n));
            prop_assert_eq!(u.iter().sum::<i64>(), 1_000_000_000);
            prop_assert!(u.iter().all(|&v| v >= 0));
        }
    }

    pub(super) fn wall_scene() -> (VoxelMap, CameraIntrinsics) {
        // A 1.6 m square wall of cells at z = 2 m, 1 cm voxels; fills the view.
        let cells = (-80..80).flat_map(|x| (-80..80).map(move |y| [x, y, 200]));
        let map = VoxelMap::from_cells(0.01, cells).unwrap();
        let intr = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap();
        (map, intr)
    }

    #[test]
    fn empty_map_never_hits() {
        let map = VoxelMap::from_cells(0.1, []).unwrap();
        assert!(map
            .raycast(&Ray::new(Vec3::zeros(), Vec3::x()), 100.0)
            .is_none());
    }

    #[test]
    fn single_cell_on_axis() {
        let map = VoxelMap::from_cells(1.0, [[5, 0, 0]]).unwrap();
        let hit = map
            .raycast(&Ray::new(Vec3::zeros(), Vec3::x()), 20.0)
            .unwrap();
        assert_eq!(hit.cell, [5, 0, 0]);
        assert!((hit.distance - 5.0).abs() < 1e-12);
        assert!(map
            .raycast(&Ray::new(Vec3::zeros(), Vec3::x()), 4.9)
            .is_none());
        assert!(map
            .raycast(&Ray::new(Vec3::zeros(), -Vec3::x()), 20.0)
            .is_none());
    }

    #[test]
    fn origin_inside_occupied_cell() {
        let map = VoxelMap::from_cells(1.0, [[0, 0, 0], [3, 0, 0]]).unwrap();
        let hit = map
            .raycast(&Ray::new(Vec3::new(0.5, 0.5, 0.5), Vec3::x()), 20.0)
            .unwrap();
        assert_eq!(hit.cell, [0, 0, 0]);
        assert_eq!(hit.distance, 0.0);
    }

    #[test]
    fn four_detections_add_unit_mass() {
        let (map, intr) = wall_scene();
        let set = DetectionSet::new(
            0,
            "harris",
            vec![
                Detection::new(10, 10, 0.25),
                Detection::new(20, 30, 0.25),
                Detection::new(40, 5, 0.25),
                Detection::new(60, 40, 0.25),
            ],
        );
        let stats = map.paint_frame(&intr, &Pose::identity(), &set, DEFAULT_MAX_RANGE);
        assert_eq!(
            stats,
            PaintStats {
                painted: 4,
                missed: 0
            }
        );
        assert_eq!(map.total_score_units(), 1_000_000_000);
    }

    #[test]
    fn thirds_sum_exactly() {
        let (map, intr) = wall_scene();
        let dets = (0..3)
            .map(|i| Detection::new(5 + 20 * i, 20, 1.0 / 3.0))
            .collect();
        map.paint_frame(
            &intr,
            &Pose::identity(),
            &DetectionSet::new(0, "fast", dets),
            DEFAULT_MAX_RANGE,
        );
        assert_eq!(map.total_score_units(), 1_000_000_000);
    }

    #[test]
    fn misses_are_counted_not_painted() {
        let (map, intr) = wall_scene();
        let away = Pose::new(axis_y(std::f64::consts::PI), Vec3::zeros()).unwrap();
        let set = DetectionSet::new(
            0,
            "harris",
            vec![Detection::new(10, 10, 0.5), Detection::new(11, 10, 0.5)],
        );
        let stats = map.paint_frame(&intr, &away, &set, DEFAULT_MAX_RANGE);
        assert_eq!(
            stats,
            PaintStats {
                painted: 0,
                missed: 2
            }
        );
        assert_eq!(map.total_score_units(), 0);
        // Too short a range also misses.
        let stats = map.paint_frame(&intr, &Pose::identity(), &set, 1.5);
        assert_eq!(stats.missed, 2);
    }

    fn axis_y(angle: f64) -> crate::geometry::Mat3 {
        crate::geometry::axis_angle(&Vec3::y(), angle)
    }

    #[test]
    fn painting_is_additive_across_frames() {
        let (map, intr) = wall_scene();
        let set = DetectionSet::new(0, "harris", vec![Detection::new(32, 24, 0.3)]);
        map.paint_frame(&intr, &Pose::identity(), &set, DEFAULT_MAX_RANGE);
        let set2 = DetectionSet::new(1, "harris", vec![Detection::new(32, 24, 0.45)]);
        map.paint_frame(&intr, &Pose::identity(), &set2, DEFAULT_MAX_RANGE);
        let ray = pixel_ray((32.0, 24.0), &intr, &Pose::identity());
        let (score, views) = map.query(&ray, DEFAULT_MAX_RANGE).unwrap();
        assert!((score - 0.75).abs() < 1e-9);
        assert_eq!(views, 0);
    }

    #[test]
    fn visibility_dedups_within_frame() {
        let map = VoxelMap::from_cells(1.0, [[0, 0, 5]]).unwrap();
        // Every pixel of this tiny camera lands in the same large cell.
        let intr = CameraIntrinsics::new(1000.0, 1000.0, 1.0, 1.0, 3, 3).unwrap();
        let pose = Pose::from_translation(Vec3::new(0.5, 0.5, 0.0));
        assert_eq!(map.visibility_pass(&intr, &pose, 20.0, 1), 1);
        assert_eq!(map.cell([0, 0, 5]).unwrap().views, 1);
        assert_eq!(map.visibility_pass(&intr, &pose, 20.0, 1), 1);
        assert_eq!(map.cell([0, 0, 5]).unwrap().views, 2);
    }

    #[test]
    fn visibility_looking_away_is_zero() {
        let (map, intr) = wall_scene();
        let away = Pose::new(axis_y(std::f64::consts::PI), Vec3::zeros()).unwrap();
        assert_eq!(map.visibility_pass(&intr, &away, 20.0, 1), 0);
        assert!(map.cells().all(|(_, v)| v.views == 0));
    }

    #[test]
    fn unpainted_cell_reports_views_only() {
        let (map, intr) = wall_scene();
        map.visibility_pass(&intr, &Pose::identity(), 20.0, 1);
        map.visibility_pass(&intr, &Pose::identity(), 20.0, 2);
        let ray = pixel_ray((0.0, 0.0), &intr, &Pose::identity());
        assert_eq!(map.query(&ray, 20.0), Some((0.0, 2)));
        assert_eq!(map.query(&Ray::new(Vec3::zeros(), -Vec3::z()), 20.0), None);
    }

    #[test]
    fn painting_order_does_not_matter() {
        let (a, intr) = wall_scene();
        let (b, _) = wall_scene();
        let sets: Vec<DetectionSet> = (0..5)
            .map(|f| {
                let n = 3 + f;
                let dets = (0..n)
                    .map(|i| {
                        Detection::new((i * 7 % 60) as u32, (i * 5 % 40) as u32, 1.0 / n as f64)
                    })
                    .collect();
                DetectionSet::new(f, "gftt", dets)
            })
            .collect();
        let poses: Vec<Pose> = (0..5)
            .map(|f| Pose::from_translation(Vec3::new(0.01 * f as f64, 0.0, 0.0)))
            .collect();
        for f in 0..5 {
            a.paint_frame(&intr, &poses[f], &sets[f], 20.0);
        }
        for f in (0..5).rev() {
            b.paint_frame(&intr, &poses[f], &sets[f], 20.0);
        }
        assert!(a.cells().zip(b.cells()).all(|(x, y)| x == y));
        assert_eq!(a.total_score_units(), 5_000_000_000);
    }

    #[test]
    fn reset_clears_accumulators() {
        let (mut map, intr) = wall_scene();
        map.visibility_pass(&intr, &Pose::identity(), 20.0, 4);
        map.reset();
        assert!(map.cells().all(|(_, v)| v == CellValue::default()));
    }
}
