//! Triangle meshes and the minimal OBJ subset used for scene exchange.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Optional per-triangle shade in [0, 1].
    pub shades: Option<Vec<f64>>,
}

const DEGENERATE_AREA: f64 = 1e-18;

impl TriangleMesh {
    /// Builds a mesh, dropping zero-area triangles.
    pub fn new(
        vertices: Vec<Vec3>,
        triangles: Vec<[u32; 3]>,
        shades: Option<Vec<f64>>,
    ) -> Result<Self> {
        if let Some(s) = &shades {
            if s.len() != triangles.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} shades for {} triangles",
                    s.len(),
                    triangles.len()
                )));
            }
            if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("shade outside [0, 1]".into()));
            }
        }
        for t in &triangles {
            if t.iter().any(|&i| i as usize >= vertices.len()) {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t:?} references a vertex beyond {}",
                    vertices.len()
                )));
            }
        }
        let keep: Vec<bool> = triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| vertices[i as usize]);
                (b - a).cross(&(c - a)).norm_squared() > DEGENERATE_AREA
            })
            .collect();
        let shades = shades.map(|s| {
            s.into_iter()
                .zip(&keep)
                .filter_map(|(v, k)| k.then_some(v))
                .collect()
        });
        let triangles = triangles
            .into_iter()
            .zip(&keep)
            .filter_map(|(t, k)| k.then_some(t))
            .collect();
        Ok(Self {
            vertices,
            triangles,
            shades,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        self.triangles[i].map(|v| self.vertices[v as usize])
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let mut it = self.vertices.iter();
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v + offset).collect(),
            triangles: self.triangles.clone(),
            shades: self.shades.clone(),
        }
    }

    /// Parses `v` and triangular `f` records; everything else is ignored.
    pub fn parse_obj(path: &Path, text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let coords: Vec<f64> = parts
                        .take(3)
                        .map(|p| p.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::parse(path, lineno, format!("vertex: {e}")))?;
                    if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
                        return Err(Error::parse(
                            path,
                            lineno,
                            "vertex needs 3 finite coordinates",
                        ));
                    }
                    vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
                }
                Some("f") => {
                    let idx: Vec<&str> = parts.collect();
                    if idx.len() != 3 {
                        return Err(Error::parse(
                            path,
                            lineno,
                            format!(
                                "only triangular faces are supported, found {} vertices",
                                idx.len()
                            ),
                        ));
                    }
                    let mut tri = [0u32; 3];
                    for (slot, tok) in tri.iter_mut().zip(&idx) {
                        let head = tok.split('/').next().unwrap_or("");
                        let one_based: i64 = head.parse().map_err(|e| {
                            Error::parse(path, lineno, format!("face index `{tok}`: {e}"))
                        })?;
                        if one_based < 1 || one_based as usize > vertices.len() {
                            return Err(Error::parse(
                                path,
                                lineno,
                                format!(
                                    "face index {one_based} out of range 1..={}",
                                    vertices.len()
                                ),
                            ));
                        }
                        *slot = (one_based - 1) as u32;
                    }
                    triangles.push(tri);
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles, None)
    }

    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(path, &text)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }
}
