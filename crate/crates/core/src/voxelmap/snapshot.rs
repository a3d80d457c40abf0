//! Binary map snapshot: `R3DV`, version, resolution, cell count, then one
//! (key, score units, views) record per cell in key order. Little-endian.

use std::fs;
use std::path::Path;
use std::sync::atomic::Ordering;

use super::VoxelMap;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"R3DV";
const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 8;
const RECORD: usize = 8 + 8 + 4;

impl VoxelMap {
    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + RECORD * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.resolution.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for id in 0..self.len() {
            out.extend_from_slice(&self.keys[id].to_le_bytes());
            out.extend_from_slice(&self.scores[id].load(Ordering::Relaxed).to_le_bytes());
            out.extend_from_slice(&self.views[id].load(Ordering::Relaxed).to_le_bytes());
        }
        out
    }

    pub fn from_snapshot_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(bad("not a voxel map snapshot".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(bad(format!("unsupported snapshot version {version}")));
        }
        let resolution = f64::from_bits(u64_at(8));
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(bad(format!("invalid resolution {resolution}")));
        }
        let count = u64_at(16) as usize;
        if (bytes.len() - HEADER) / RECORD != count
            || !(bytes.len() - HEADER).is_multiple_of(RECORD)
        {
            return Err(bad(format!(
                "expected {count} cells, file holds {} bytes of records",
                bytes.len() - HEADER
            )));
        }
        let mut keys = Vec::with_capacity(count);
        let mut vals = Vec::with_capacity(count);
        for i in 0..count {
            let o = HEADER + i * RECORD;
            let key = u64_at(o);
            let score = u64_at(o + 8) as i64;
            let views = u32_at(o + 16);
            if key >> 63 != 0 {
                return Err(bad(format!("cell {i}: malformed key {key:#x}")));
            }
            if keys.last().is_some_and(|&p| p >= key) {
                return Err(bad(format!("cell {i}: keys not strictly ascending")));
            }
            if score < 0 {
                return Err(bad(format!("cell {i}: negative score")));
            }
            keys.push(key);
            vals.push((score, views));
        }
        let map = VoxelMap::from_sorted_keys(resolution, keys);
        for (id, (s, v)) in vals.into_iter().enumerate() {
            map.scores[id].store(s, Ordering::Relaxed);
            map.views[id].store(v, Ordering::Relaxed);
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_snapshot_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot_bytes(path, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::wall_scene;
    use super::*;
    use crate::geometry::Pose;

    #[test]
    fn roundtrip_preserves_accumulators() {
        let (map, intr) = wall_scene();
        map.visibility_pass(&intr, &Pose::identity(), 20.0, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.r3dv");
        map.save(&path).unwrap();
        let back = VoxelMap::load(&path).unwrap();
        assert_eq!(back.resolution(), map.resolution());
        assert!(back.cells().eq(map.cells()));
        assert_eq!(back.to_snapshot_bytes(), map.to_snapshot_bytes());
    }

    #[test]
    fn corrupt_snapshots_rejected() {
        let (map, _) = wall_scene();
        let bytes = map.to_snapshot_bytes();
        let p = Path::new("x");
        assert!(VoxelMap::from_snapshot_bytes(p, &bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(VoxelMap::from_snapshot_bytes(p, &wrong).is_err());
        let mut unsorted = bytes.clone();
        let a = HEADER;
        let b = HEADER + RECORD;
        let (first, second) = unsorted[a..b + RECORD].split_at_mut(RECORD);
        first.swap_with_slice(second);
        assert!(VoxelMap::from_snapshot_bytes(p, &unsorted).is_err());
    }
}
