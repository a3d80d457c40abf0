//! Classical interest point detectors and detection files.
//!
//! All detectors work on 8-bit images. Intensities are first shifted so the
//! darkest pixel is zero; the shifted values are small integers, so every
//! derived quantity is bitwise invariant to adding a constant to the image.
//! Thresholds that are not relative to the image maximum are expressed on
//! the unit scale (intensity / 255), except the FAST threshold which keeps
//! its customary 8-bit units.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::imageproc::{difference_of_gaussians, gaussian_blur, local_maxima, nms_cap};
use crate::raster::{GrayImage, ScoreGrid};

/// Detections of one detector on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub frame_index: usize,
    pub detector: String,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(
        frame_index: usize,
        detector: impl Into<String>,
        detections: Vec<Detection>,
    ) -> Self {
        Self {
            frame_index,
            detector: detector.into(),
            detections,
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Harris,
    Gftt,
    Fast,
    Dog,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [Self::Harris, Self::Gftt, Self::Fast, Self::Dog];

    pub fn name(self) -> &'static str {
        match self {
            Self::Harris => "harris",
            Self::Gftt => "gftt",
            Self::Fast => "fast",
            Self::Dog => "dog",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown detector `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    pub harris_k: f64,
    pub harris_threshold: f64,
    /// Absolute response floor under the relative Harris threshold.
    pub harris_min_response: f64,
    pub gftt_quality: f64,
    /// Absolute minimum-eigenvalue floor under the relative quality level.
    pub gftt_min_response: f64,
    pub gftt_max_count: usize,
    pub fast_threshold: u8,
    pub fast_arc: usize,
    pub dog_sigma1: f64,
    pub dog_sigma2: f64,
    pub dog_threshold: f64,
    pub nms_radius: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            harris_k: 0.04,
            harris_threshold: 0.01,
            harris_min_response: 1000.0,
            gftt_quality: 0.01,
            gftt_min_response: 400.0,
            gftt_max_count: 1000,
            fast_threshold: 20,
            fast_arc: 9,
            dog_sigma1: 1.0,
            dog_sigma2: 1.6,
            dog_threshold: 0.03,
            nms_radius: 2,
        }
    }
}

impl DetectorParams {
    pub fn run(&self, kind: DetectorKind, image: &GrayImage) -> Vec<Detection> {
        match kind {
            DetectorKind::Harris => detect_harris(
                image,
                self.harris_k,
                self.harris_threshold,
                self.harris_min_response,
                self.nms_radius,
            ),
            DetectorKind::Gftt => detect_shi_tomasi(
                image,
                self.gftt_quality,
                self.gftt_min_response,
                self.nms_radius,
                self.gftt_max_count,
            ),
            DetectorKind::Fast => {
                detect_fast(image, self.fast_threshold, self.fast_arc, self.nms_radius)
            }
            DetectorKind::Dog => detect_dog(
                image,
                self.dog_sigma1,
                self.dog_sigma2,
                self.dog_threshold,
                self.nms_radius,
            ),
        }
    }
}

/// Structure tensor smoothing sigma shared by Harris and Shi-Tomasi.
const TENSOR_SIGMA: f64 = 1.0;
/// Sobel support plus the tensor smoothing radius.
const TENSOR_MARGIN: usize = 1 + 3;
const FAST_MARGIN: usize = 3;

/// Intensities relative to the image minimum, as exact small integers.
fn shifted(image: &GrayImage) -> ScoreGrid {
    let lo = image.as_slice().iter().copied().min().unwrap_or(0);
    image.map(|v| (v - lo) as f64)
}

fn restrict_to_margin(grid: &mut ScoreGrid, margin: usize, fill: f64) {
    let (w, h) = grid.dims();
    for y in 0..h {
        for x in 0..w {
            if x < margin || y < margin || x + margin >= w || y + margin >= h {
                grid.set(x, y, fill);
            }
        }
    }
}

/// Smoothed structure tensor components (Ixx, Iyy, Ixy) from Sobel
/// gradients.
fn structure_tensor(image: &GrayImage) -> (ScoreGrid, ScoreGrid, ScoreGrid) {
    let img = shifted(image);
    let (w, h) = img.dims();
    let mut ixx = ScoreGrid::zeros(w, h);
    let mut iyy = ScoreGrid::zeros(w, h);
    let mut ixy = ScoreGrid::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| img.get_clamped(x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let (ux, uy) = (x as usize, y as usize);
            ixx.set(ux, uy, gx * gx);
            iyy.set(ux, uy, gy * gy);
            ixy.set(ux, uy, gx * gy);
        }
    }
    let blur = |g: &ScoreGrid| gaussian_blur(g, TENSOR_SIGMA).expect("positive sigma");
    (blur(&ixx), blur(&iyy), blur(&ixy))
}

pub fn harris_response(image: &GrayImage, k: f64) -> ScoreGrid {
    let (a, c, b) = structure_tensor(image);
    let mut r = ScoreGrid::from_fn(a.width(), a.height(), |x, y| {
        let (a, b, c) = (a.get(x, y), b.get(x, y), c.get(x, y));
        let trace = a + c;
        (a * c - b * b) - k * trace * trace
    });
    restrict_to_margin(&mut r, TENSOR_MARGIN, 0.0);
    r
}

pub fn min_eigen_response(image: &GrayImage) -> ScoreGrid {
    let (a, c, b) = structure_tensor(image);
    let mut r = ScoreGrid::from_fn(a.width(), a.height(), |x, y| {
        let (a, b, c) = (a.get(x, y), b.get(x, y), c.get(x, y));
        let half_diff = 0.5 * (a - c);
        (0.5 * (a + c) - (half_diff * half_diff + b * b).sqrt()).max(0.0)
    });
    restrict_to_margin(&mut r, TENSOR_MARGIN, 0.0);
    r
}

/// Positive local maxima of `response` at or above both `rel * max(response)`
/// and `min_response`.
///
/// The absolute floor keeps frames without any real corner from promoting
/// edge and shading residue to detections.
fn relative_peaks(
    response: &ScoreGrid,
    rel: f64,
    min_response: f64,
    radius: usize,
) -> Vec<Detection> {
    let max = response.max_value();
    if !(max > 0.0) {
        return Vec::new();
    }
    let floor = (rel * max).max(min_response).max(f64::MIN_POSITIVE);
    local_maxima(response, radius, floor)
}

/// Harris corners: `det(M) - k trace(M)^2` on the Sobel structure tensor.
pub fn detect_harris(
    image: &GrayImage,
    k: f64,
    threshold: f64,
    min_response: f64,
    nms_radius: usize,
) -> Vec<Detection> {
    relative_peaks(
        &harris_response(image, k),
        threshold,
        min_response,
        nms_radius,
    )
}

/// Good Features to Track: minimum tensor eigenvalue, capped to
/// `max_count` strongest well-separated corners.
pub fn detect_shi_tomasi(
    image: &GrayImage,
    quality: f64,
    min_response: f64,
    nms_radius: usize,
    max_count: usize,
) -> Vec<Detection> {
    let peaks = relative_peaks(
        &min_eigen_response(image),
        quality,
        min_response,
        nms_radius,
    );
    nms_cap(&peaks, nms_radius as f64, max_count)
}

/// Radius-3 Bresenham circle, clockwise from 12 o'clock.
pub const FAST_CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// FAST segment score at one pixel: sum of absolute differences over the
/// qualifying contiguous arc, or 0 when no arc of length `arc` exists.
fn fast_score(img: &ScoreGrid, x: isize, y: isize, t: f64, arc: usize) -> f64 {
    let center = img.get(x as usize, y as usize);
    let mut diffs = [0.0f64; 16];
    let mut class = [0i8; 16];
    for (i, (dx, dy)) in FAST_CIRCLE.iter().enumerate() {
        let v = img.get((x + dx) as usize, (y + dy) as usize);
        diffs[i] = v - center;
        class[i] = if v > center + t {
            1
        } else if v < center - t {
            -1
        } else {
            0
        };
    }
    let mut best = 0.0;
    for sign in [1i8, -1] {
        if class.iter().all(|c| *c == sign) {
            return diffs.iter().map(|d| d.abs()).sum();
        }
        // Start scanning just after a non-member so runs never wrap twice.
        let Some(start) = (0..16).find(|&i| class[i] != sign) else {
            continue;
        };
        let mut run = 0usize;
        let mut sum = 0.0;
        for step in 1..=16 {
            let i = (start + step) % 16;
            if class[i] == sign {
                run += 1;
                sum += diffs[i].abs();
            } else {
                if run >= arc && sum > best {
                    best = sum;
                }
                run = 0;
                sum = 0.0;
            }
        }
    }
    best
}

pub fn fast_response(image: &GrayImage, threshold: u8, arc: usize) -> ScoreGrid {
    let img = shifted(image);
    let (w, h) = img.dims();
    let mut score = ScoreGrid::zeros(w, h);
    if w <= 2 * FAST_MARGIN || h <= 2 * FAST_MARGIN {
        return score;
    }
    let t = threshold as f64;
    for y in FAST_MARGIN..h - FAST_MARGIN {
        for x in FAST_MARGIN..w - FAST_MARGIN {
            score.set(x, y, fast_score(&img, x as isize, y as isize, t, arc));
        }
    }
    score
}

/// FAST segment test corners with score-based non-maximum suppression.
pub fn detect_fast(
    image: &GrayImage,
    threshold: u8,
    arc: usize,
    nms_radius: usize,
) -> Vec<Detection> {
    local_maxima(
        &fast_response(image, threshold, arc),
        nms_radius,
        f64::MIN_POSITIVE,
    )
}

/// |DoG| on unit-scaled intensities, zero outside the kernel support margin.
pub fn dog_response(image: &GrayImage, sigma1: f64, sigma2: f64) -> Result<ScoreGrid> {
    let unit = shifted(image).map(|v| v / 255.0);
    let mut dog = difference_of_gaussians(&unit, sigma1, sigma2)?.map(f64::abs);
    restrict_to_margin(&mut dog, (3.0 * sigma2).ceil() as usize, 0.0);
    Ok(dog)
}

/// Single-octave Difference-of-Gaussians extrema.
pub fn detect_dog(
    image: &GrayImage,
    sigma1: f64,
    sigma2: f64,
    threshold: f64,
    nms_radius: usize,
) -> Vec<Detection> {
    match dog_response(image, sigma1, sigma2) {
        Ok(r) => local_maxima(&r, nms_radius, threshold.max(f64::MIN_POSITIVE)),
        Err(_) => Vec::new(),
    }
}

/// Replaces every confidence by `1 / N` for the `N` detections of the set.
pub fn normalize_frame_confidence(set: &DetectionSet) -> DetectionSet {
    let n = set.detections.len();
    let c = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    DetectionSet {
        frame_index: set.frame_index,
        detector: set.detector.clone(),
        detections: set
            .detections
            .iter()
            .map(|d| Detection::new(d.x, d.y, c))
            .collect(),
    }
}

/// Result of reading a detection file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedDetections {
    /// Sorted by frame index, then detector name.
    pub sets: Vec<DetectionSet>,
    /// Records dropped for lying outside their frame.
    pub rejected: usize,
}

/// Reads `frame_index,x,y,confidence,detector_name` records.
///
/// `frames` maps every known frame index to its `(width, height)`.
pub fn load_external_detections(
    path: &Path,
    frames: &BTreeMap<usize, (usize, usize)>,
) -> Result<LoadedDetections> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detection_records(path, &text, frames)
}

pub(crate) fn parse_detection_records(
    path: &Path,
    text: &str,
    frames: &BTreeMap<usize, (usize, usize)>,
) -> Result<LoadedDetections> {
    let mut grouped: BTreeMap<(usize, String), Vec<Detection>> = BTreeMap::new();
    let mut rejected = 0;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 5 comma-separated fields, found {}", fields.len()),
            ));
        }
        let bad =
            |what: &str, e: &dyn fmt::Display| Error::parse(path, lineno, format!("{what}: {e}"));
        let frame: usize = fields[0].parse().map_err(|e| bad("frame index", &e))?;
        let x: i64 = fields[1].parse().map_err(|e| bad("x", &e))?;
        let y: i64 = fields[2].parse().map_err(|e| bad("y", &e))?;
        let confidence: f64 = fields[3].parse().map_err(|e| bad("confidence", &e))?;
        if !confidence.is_finite() || confidence < 0.0 {
            return Err(Error::parse(
                path,
                lineno,
                format!("confidence {confidence} must be finite and >= 0"),
            ));
        }
        let name = fields[4];
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::parse(
                path,
                lineno,
                "detector name must be a single token",
            ));
        }
        let &(w, h) = frames
            .get(&frame)
            .ok_or_else(|| Error::parse(path, lineno, format!("unknown frame index {frame}")))?;
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            rejected += 1;
            continue;
        }
        grouped
            .entry((frame, name.to_string()))
            .or_default()
            .push(Detection::new(x as u32, y as u32, confidence));
    }
    if rejected > 0 {
        log::warn!(
            "{}: {rejected} out-of-bounds detections rejected",
            path.display()
        );
    }
    Ok(LoadedDetections {
        sets: grouped
            .into_iter()
            .map(|((frame_index, detector), detections)| DetectionSet {
                frame_index,
                detector,
                detections,
            })
            .collect(),
        rejected,
    })
}

pub fn format_detection_file<'a>(sets: impl IntoIterator<Item = &'a DetectionSet>) -> String {
    let mut s = String::from("# frame_index,x,y,confidence,detector_name\n");
    for set in sets {
        for d in &set.detections {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                set.frame_index, d.x, d.y, d.confidence, set.detector
            );
        }
    }
    s
}

/// Groups sets by frame index.
pub fn by_frame(sets: &[DetectionSet]) -> HashMap<usize, Vec<&DetectionSet>> {
    let mut map: HashMap<usize, Vec<&DetectionSet>> = HashMap::new();
    for s in sets {
        map.entry(s.frame_index).or_default().push(s);
    }
    map
}
