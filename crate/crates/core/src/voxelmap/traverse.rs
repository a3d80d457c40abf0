//! First-hit ray traversal: a coarse grid walk over 8³ bricks, descending
//! into a per-cell walk only inside bricks that hold occupied cells.
//! Both levels are the classic incremental voxel walk (one comparison and
//! one addition per cell crossed).

use super::{VoxelMap, BRICK};
use crate::geometry::{Ray, Vec3};

/// Incremental walk state along one axis set.
struct Walk {
    step: [i32; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
}

impl Walk {
    /// `cell` is the starting index of a grid with spacing `size` whose
    /// cell `i` spans `[base + i*size, base + (i+1)*size)` (cell units).
    fn new(o: &Vec3, d: &Vec3, base: [f64; 3], size: f64, cell: [i32; 3]) -> Self {
        let mut w = Walk {
            step: [0; 3],
            t_max: [f64::INFINITY; 3],
            t_delta: [f64::INFINITY; 3],
        };
        for a in 0..3 {
            if d[a] > 0.0 {
                w.step[a] = 1;
                w.t_max[a] = (base[a] + (cell[a] + 1) as f64 * size - o[a]) / d[a];
                w.t_delta[a] = size / d[a];
            } else if d[a] < 0.0 {
                w.step[a] = -1;
                w.t_max[a] = (base[a] + cell[a] as f64 * size - o[a]) / d[a];
                w.t_delta[a] = -size / d[a];
            }
        }
        w
    }

    /// Advances across the nearest boundary; returns (axis, entry t).
    fn advance(&mut self, cell: &mut [i32; 3]) -> f64 {
        let a = if self.t_max[0] < self.t_max[1] {
            if self.t_max[0] < self.t_max[2] {
                0
            } else {
                2
            }
        } else if self.t_max[1] < self.t_max[2] {
            1
        } else {
            2
        };
        let t = self.t_max[a];
        cell[a] += self.step[a];
        self.t_max[a] += self.t_delta[a];
        t
    }
}

/// Ray parameter interval inside an axis-aligned box, clipped to
/// `[0, t_end]`.
fn clip_box(o: &Vec3, d: &Vec3, lo: [f64; 3], hi: [f64; 3], t_end: f64) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = t_end;
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
        } else {
            let inv = 1.0 / d[a];
            let (mut n, mut f) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            t0 = t0.max(n);
            t1 = t1.min(f);
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

impl VoxelMap {
    /// Occupied cell id and entry distance (meters) of the first hit.
    pub(super) fn raycast_id(&self, ray: &Ray, max_range: f64) -> Option<(usize, f64)> {
        if self.keys.is_empty() || !(max_range > 0.0) {
            return None;
        }
        let res = self.resolution;
        let b = &self.bricks;
        // Work in cell units: positions divided by the resolution, so the
        // ray parameter is distance / resolution.
        let o = ray.origin / res;
        let d = ray.direction;
        if !o.iter().chain(d.iter()).all(|v| v.is_finite()) {
            return None;
        }
        let lo = b.lo.map(|v| v as f64);
        let hi = b.hi.map(|v| (v + 1) as f64);
        let (t0, t1) = clip_box(&o, &d, lo, hi, max_range / res)?;

        let p = o + d * t0;
        let mut brick = [0, 1, 2]
            .map(|a| (((p[a] - lo[a]) / BRICK as f64).floor() as i32).clamp(0, b.dims[a] - 1));
        let mut coarse = Walk::new(&o, &d, lo, BRICK as f64, brick);
        let mut t_enter = t0;
        loop {
            if let Some(mask) = b.mask(brick) {
                let base = [0, 1, 2].map(|a| b.lo[a] + brick[a] * BRICK);
                if let Some(hit) = self.walk_brick(&o, &d, mask, base, t_enter, t1) {
                    return Some((hit.0, hit.1 * res));
                }
            }
            t_enter = coarse.advance(&mut brick);
            if t_enter > t1 || (0..3).any(|a| brick[a] < 0 || brick[a] >= b.dims[a]) {
                return None;
            }
        }
    }

    fn walk_brick(
        &self,
        o: &Vec3,
        d: &Vec3,
        mask: &super::BrickMask,
        base: [i32; 3],
        t_enter: f64,
        t_end: f64,
    ) -> Option<(usize, f64)> {
        let p = o + d * t_enter;
        let mut cell = [0, 1, 2].map(|a| (p[a].floor() as i32).clamp(base[a], base[a] + BRICK - 1));
        let mut walk = Walk::new(o, d, [0.0; 3], 1.0, cell);
        let mut t = t_enter;
        loop {
            let l = [0, 1, 2].map(|a| cell[a] - base[a]);
            let bit = ((l[2] * BRICK + l[1]) * BRICK + l[0]) as usize;
            if mask[bit >> 6] >> (bit & 63) & 1 == 1 {
                let id = self.id_of(cell).expect("brick mask and cell table agree");
                return Some((id, t));
            }
            t = walk.advance(&mut cell);
            if t > t_end || (0..3).any(|a| cell[a] < base[a] || cell[a] >= base[a] + BRICK) {
                return None;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{pack, unpack};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exact oracle: slab entry distance of every occupied cell, minimum
    /// over all cells.
    fn slab_entry(ray: &Ray, res: f64, c: [i32; 3], max_range: f64) -> Option<f64> {
        let lo = c.map(|v| v as f64 * res);
        let hi = c.map(|v| (v + 1) as f64 * res);
        clip_box(&ray.origin, &ray.direction, lo, hi, max_range).map(|(t0, _)| t0)
    }

    fn brute_first(map: &VoxelMap, ray: &Ray, max_range: f64) -> Option<([i32; 3], f64)> {
        map.keys()
            .iter()
            .filter_map(|&k| {
                let c = unpack(k);
                slab_entry(ray, map.resolution(), c, max_range).map(|t| (c, t))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Reference oracle: march in steps of resolution / 20.
    fn stepping_first(map: &VoxelMap, ray: &Ray, max_range: f64) -> Option<[i32; 3]> {
        let step = map.resolution() / 20.0;
        let n = (max_range / step).ceil() as usize;
        (0..=n).find_map(|i| {
            let c = map.cell_of(&ray.at(i as f64 * step));
            map.is_occupied(c).then_some(c)
        })
    }

    fn random_map(rng: &mut ChaCha8Rng, res: f64, dense_limit: usize) -> VoxelMap {
        let mut keys: Vec<u64> = (0..400)
            .map(|_| {
                pack([
                    rng.random_range(-20..20),
                    rng.random_range(-20..20),
                    rng.random_range(-20..20),
                ])
            })
            .collect();
        // A slab so that many rays hit something.
        keys.extend((-20..20).flat_map(|x| (-20..20).map(move |y| pack([x, y, 17]))));
        keys.sort_unstable();
        keys.dedup();
        VoxelMap::with_brick_limit(res, keys, dense_limit)
    }

    fn random_ray(rng: &mut ChaCha8Rng, res: f64) -> Ray {
        let o = Vec3::new(
            rng.random_range(-25.0..25.0),
            rng.random_range(-25.0..25.0),
            rng.random_range(-25.0..25.0),
        ) * res;
        let d = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Ray::new(o, if d.norm() < 1e-3 { Vec3::z() } else { d })
    }

    fn check_against_oracles(dense_limit: usize, seed: u64, rays: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = 0.07;
        let map = random_map(&mut rng, res, dense_limit);
        let max_range = 60.0 * res;
        let mut hits = 0;
        for _ in 0..rays {
            let ray = random_ray(&mut rng, res);
            let got = map.raycast(&ray, max_range);
            let want = brute_first(&map, &ray, max_range);
            match (got, want) {
                (None, None) => {}
                (Some(h), Some((c, t))) => {
                    hits += 1;
                    // Ties (ray through an edge or corner) may resolve to a
                    // different cell with the same entry distance.
                    assert!((h.distance - t).abs() < 1e-9, "{ray:?}: {h:?} vs {c:?}@{t}");
                    let own = slab_entry(&ray, res, h.cell, max_range).unwrap();
                    assert!((own - h.distance).abs() < 1e-9);
                    if let Some(s) = stepping_first(&map, &ray, max_range) {
                        if s != h.cell {
                            // The stepper can only skip cells it crosses in
                            // less than one step.
                            let lo = h.cell.map(|v| v as f64 * res);
                            let hi = h.cell.map(|v| (v + 1) as f64 * res);
                            let (a, b) =
                                clip_box(&ray.origin, &ray.direction, lo, hi, max_range).unwrap();
                            assert!(
                                b - a < res / 20.0 + 1e-12 || (t - max_range).abs() < res / 20.0
                            );
                        }
                    }
                }
                (g, w) => panic!("{ray:?}: traversal {g:?} vs oracle {w:?}"),
            }
        }
        assert!(hits > rays / 5, "too few hits to be meaningful: {hits}");
    }

    #[test]
    fn agrees_with_oracles_dense_bricks() {
        check_against_oracles(super::super::DENSE_BRICK_LIMIT, 11, 10_000);
    }

    #[test]
    fn agrees_with_oracles_hashed_bricks() {
        check_against_oracles(0, 12, 3_000);
    }

    #[test]
    fn axis_aligned_rays_on_cell_faces() {
        let map = VoxelMap::from_cells(0.5, [[2, 0, 0], [2, -1, 0], [4, 0, 0]]).unwrap();
        // Ray along the shared face y = 0 between cells (2,0,0) and (2,-1,0).
        let hit = map
            .raycast(&Ray::new(Vec3::new(0.0, 0.0, 0.25), Vec3::x()), 10.0)
            .unwrap();
        assert_eq!(hit.cell[0], 2);
        assert!((hit.distance - 1.0).abs() < 1e-12);
        // Starting beyond the first cell finds the next one.
        let hit = map
            .raycast(&Ray::new(Vec3::new(1.6, 0.25, 0.25), Vec3::x()), 10.0)
            .unwrap();
        assert_eq!(hit.cell, [4, 0, 0]);
        assert!((hit.distance - 0.4).abs() < 1e-12);
    }

    #[test]
    fn long_ray_across_many_empty_bricks() {
        let map = VoxelMap::from_cells(0.01, [[0, 0, 0], [1500, 1, 2]]).unwrap();
        let target = Vec3::new(1500.5, 1.5, 2.5) * 0.01;
        let origin = Vec3::new(0.005, 0.005, 0.015);
        let ray = Ray::new(origin, target - origin);
        let hit = map.raycast(&ray, 20.0).unwrap();
        assert_eq!(hit.cell, [1500, 1, 2]);
    }
}
