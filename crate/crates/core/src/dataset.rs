//! On-disk dataset layout shared by synthetic and ingested data:
//!
//! ```text
//! intrinsics.txt
//! poses.txt
//! mesh.obj              (optional for real data)
//! frames/NNNNNN.pgm     8-bit binary graymap
//! depth/NNNNNN.bin      little-endian f32, row-major, meters, 0 = invalid
//! ```

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::geometry::{format_poses, load_poses, CameraIntrinsics, DepthMap, Pose};
use crate::mesh::TriangleMesh;
use crate::raster::GrayImage;

pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const POSES_FILE: &str = "poses.txt";
pub const MESH_FILE: &str = "mesh.obj";
pub const FRAMES_DIR: &str = "frames";
pub const DEPTH_DIR: &str = "depth";

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.pgm")
}

pub fn depth_file_name(index: usize) -> String {
    format!("{index:06}.bin")
}

/// A fully loaded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image: GrayImage,
    pub depth: DepthMap,
    pub pose: Pose,
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(
            image.as_slice(),
            image.width() as u32,
            image.height() as u32,
            ExtendedColorType::L8,
        )
        .expect("in-memory PGM encoding");
    out
}

pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::format(
                path,
                format!("expected 8-bit graymap, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    GrayImage::from_vec(w, h, img.into_raw())
}

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    depth
        .as_slice()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

pub fn decode_depth(path: &Path, bytes: &[u8], width: usize, height: usize) -> Result<DepthMap> {
    if bytes.len() != width * height * 4 {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes for {width}x{height} f32 depth, found {}",
                width * height * 4,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DepthMap::new(width, height, data).map_err(|e| Error::format(path, e.to_string()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Dataset directory with poses and intrinsics loaded; images and depth are
/// read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    /// Ascending by frame index.
    pub poses: Vec<(usize, Pose)>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let intrinsics = CameraIntrinsics::load(&root.join(INTRINSICS_FILE))?;
        let poses_path = root.join(POSES_FILE);
        let mut poses = load_poses(&poses_path)?;
        poses.sort_by_key(|(i, _)| *i);
        if let Some(w) = poses.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::format(
                &poses_path,
                format!("duplicate frame index {}", w[0].0),
            ));
        }
        Ok(Self {
            root: root.to_path_buf(),
            intrinsics,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.poses.iter().map(|(i, _)| *i)
    }

    pub fn pose(&self, index: usize) -> Option<&Pose> {
        self.poses
            .binary_search_by_key(&index, |(i, _)| *i)
            .ok()
            .map(|k| &self.poses[k].1)
    }

    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.root.join(FRAMES_DIR).join(frame_file_name(index))
    }

    pub fn depth_path(&self, index: usize) -> PathBuf {
        self.root.join(DEPTH_DIR).join(depth_file_name(index))
    }

    pub fn mesh_path(&self) -> PathBuf {
        self.root.join(MESH_FILE)
    }

    pub fn load_image(&self, index: usize) -> Result<GrayImage> {
        let path = self.frame_path(index);
        let img = decode_pgm(&path, &read(&path)?)?;
        let (w, h) = self.intrinsics.dims();
        if img.dims() != (w, h) {
            return Err(Error::format(
                &path,
                format!("image is {:?}, intrinsics say {:?}", img.dims(), (w, h)),
            ));
        }
        Ok(img)
    }

    pub fn load_depth(&self, index: usize) -> Result<DepthMap> {
        let path = self.depth_path(index);
        let (w, h) = self.intrinsics.dims();
        decode_depth(&path, &read(&path)?, w, h)
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        let pose = *self
            .pose(index)
            .ok_or_else(|| Error::Data(format!("frame {index} is not in {}", POSES_FILE)))?;
        Ok(Frame {
            index,
            image: self.load_image(index)?,
            depth: self.load_depth(index)?,
            pose,
        })
    }

    pub fn load_mesh(&self) -> Result<TriangleMesh> {
        TriangleMesh::load_obj(&self.mesh_path())
    }
}

/// Writes a dataset tree. Frames must have distinct indices and match the
/// intrinsics' image size.
pub fn write_dataset(
    root: &Path,
    intrinsics: &CameraIntrinsics,
    mesh: Option<&TriangleMesh>,
    frames: &[Frame],
) -> Result<()> {
    let dims = intrinsics.dims();
    for f in frames {
        if f.image.dims() != dims || f.depth.dims() != dims {
            return Err(Error::SizeMismatch {
                expected: dims,
                actual: f.image.dims(),
            });
        }
    }
    let mut sorted: Vec<&Frame> = frames.iter().collect();
    sorted.sort_by_key(|f| f.index);
    if let Some(w) = sorted.windows(2).find(|w| w[0].index == w[1].index) {
        return Err(Error::InvalidArgument(format!(
            "duplicate frame index {}",
            w[0].index
        )));
    }
    write(&root.join(INTRINSICS_FILE), intrinsics.to_line().as_bytes())?;
    write(
        &root.join(POSES_FILE),
        format_poses(sorted.iter().map(|f| (f.index, &f.pose))).as_bytes(),
    )?;
    if let Some(m) = mesh {
        write(&root.join(MESH_FILE), m.to_obj().as_bytes())?;
    }
    fs::create_dir_all(root.join(FRAMES_DIR)).map_err(|e| Error::io(root.join(FRAMES_DIR), e))?;
    fs::create_dir_all(root.join(DEPTH_DIR)).map_err(|e| Error::io(root.join(DEPTH_DIR), e))?;
    for f in sorted {
        write(
            &root.join(FRAMES_DIR).join(frame_file_name(f.index)),
            &encode_pgm(&f.image),
        )?;
        write(
            &root.join(DEPTH_DIR).join(depth_file_name(f.index)),
            &encode_depth(&f.depth),
        )?;
    }
    Ok(())
}
