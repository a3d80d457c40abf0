//! Conservative surface voxelization with the separating-axis
//! triangle/box test.

use rayon::prelude::*;

use super::{pack, VoxelMap};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;

/// Whether a triangle touches or intersects an axis-aligned box.
///
/// Thirteen candidate separating axes: the three box normals, the triangle
/// normal, and the nine edge/axis cross products. Touching counts as
/// overlap.
pub fn triangle_box_overlap(center: &Vec3, half: &Vec3, tri: &[Vec3; 3]) -> bool {
    let v0 = tri[0] - center;
    let v1 = tri[1] - center;
    let v2 = tri[2] - center;
    let e0 = v1 - v0;
    let e1 = v2 - v1;
    let e2 = v0 - v2;

    // Box face normals.
    for a in 0..3 {
        let lo = v0[a].min(v1[a]).min(v2[a]);
        let hi = v0[a].max(v1[a]).max(v2[a]);
        if lo > half[a] || hi < -half[a] {
            return false;
        }
    }

    // Edge cross products: axis = unit_a × edge.
    for e in [e0, e1, e2] {
        for a in 0..3 {
            let mut axis = Vec3::zeros();
            match a {
                0 => {
                    axis.y = -e.z;
                    axis.z = e.y;
                }
                1 => {
                    axis.x = e.z;
                    axis.z = -e.x;
                }
                _ => {
                    axis.x = -e.y;
                    axis.y = e.x;
                }
            }
            let p0 = axis.dot(&v0);
            let p1 = axis.dot(&v1);
            let p2 = axis.dot(&v2);
            let r = half.x * axis.x.abs() + half.y * axis.y.abs() + half.z * axis.z.abs();
            if p0.min(p1).min(p2) > r || p0.max(p1).max(p2) < -r {
                return false;
            }
        }
    }

    // Triangle plane.
    let n = e0.cross(&e1);
    let d = n.dot(&v0);
    let r = half.x * n.x.abs() + half.y * n.y.abs() + half.z * n.z.abs();
    d.abs() <= r
}

/// Occupied cells of one triangle, as packed keys.
fn triangle_cells(tri: &[Vec3; 3], resolution: f64) -> Vec<u64> {
    let lo = tri[0].inf(&tri[1]).inf(&tri[2]);
    let hi = tri[0].sup(&tri[1]).sup(&tri[2]);
    // One extra cell each side so boundary-touching cells reach the test.
    let c0 = lo.map(|v| (v / resolution).floor() as i64 - 1);
    let c1 = hi.map(|v| (v / resolution).floor() as i64 + 1);
    let half = Vec3::repeat(resolution * 0.5);
    let mut out = Vec::new();
    for x in c0.x..=c1.x {
        for y in c0.y..=c1.y {
            for z in c0.z..=c1.z {
                let center = Vec3::new(
                    (x as f64 + 0.5) * resolution,
                    (y as f64 + 0.5) * resolution,
                    (z as f64 + 0.5) * resolution,
                );
                if triangle_box_overlap(&center, &half, tri) {
                    out.push(pack([x as i32, y as i32, z as i32]));
                }
            }
        }
    }
    out
}

/// Marks every cell whose cube meets a triangle. The grid is anchored at
/// the world origin; interiors are not filled.
pub fn voxelize_mesh(mesh: &TriangleMesh, resolution: f64) -> Result<VoxelMap> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "voxel resolution must be positive, got {resolution}"
        )));
    }
    let limit = (super::COORD_LIMIT as f64) * resolution;
    if let Some((lo, hi)) = mesh.bounds() {
        if lo.amin() <= -limit || hi.amax() >= limit - resolution {
            return Err(Error::InvalidArgument(format!(
                "mesh extent exceeds the addressable range of ±{limit} m at {resolution} m voxels"
            )));
        }
    }
    let mut keys: Vec<u64> = (0..mesh.triangles.len())
        .into_par_iter()
        .flat_map_iter(|i| triangle_cells(&mesh.triangle(i), resolution))
        .collect();
    keys.par_sort_unstable();
    keys.dedup();
    Ok(VoxelMap::from_sorted_keys(resolution, keys))
}
