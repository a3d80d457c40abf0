//! Ground-truth labels from a painted map.
//!
//! Per frame: render the painted score and the view count, smooth the count
//! (erode then box-blur), divide to get the mean score map, propose extra
//! candidates from its DoG peaks, fuse them with the detector hits into a
//! priority map, keep the maxima of the blurred `priority × mean`, threshold
//! on the mean score, and finally hand low-view pixels to a fallback
//! detector.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{pixel_ray, CameraIntrinsics, DepthMap, Detection, Pose};
use crate::imageproc::{box_blur, difference_of_gaussians, erode_min, gaussian_blur, local_maxima};
use crate::raster::{Grid, ScoreGrid};
use crate::voxelmap::VoxelMap;

/// Per-pixel view counts (integer-valued until smoothed).
pub type CountGrid = Grid<f64>;
/// Per-pixel candidate priority in `{0, 1, 2, 3}`.
pub type PriorityGrid = Grid<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    MapOnly,
    DetectorOnly,
    Both,
    Fallback,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Self::MapOnly => "map-only",
            Self::DetectorOnly => "detector-only",
            Self::Both => "both",
            Self::Fallback => "fallback",
        }
    }

    fn from_priority(c: u8) -> Self {
        match c {
            3 => Self::Both,
            2 => Self::MapOnly,
            _ => Self::DetectorOnly,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "map-only" => Ok(Self::MapOnly),
            "detector-only" => Ok(Self::DetectorOnly),
            "both" => Ok(Self::Both),
            "fallback" => Ok(Self::Fallback),
            other => Err(format!("unknown provenance `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub detection: Detection,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub frame_index: usize,
    /// In `(y, x)` order.
    pub labels: Vec<Label>,
}

impl LabelSet {
    pub fn detections(&self) -> Vec<Detection> {
        self.labels.iter().map(|l| l.detection).collect()
    }

    pub fn as_detection_set(&self, name: &str) -> DetectionSet {
        DetectionSet::new(self.frame_index, name, self.detections())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelParams {
    /// Raw view count below which a pixel falls back to the fallback detector.
    pub view_threshold: u32,
    /// Erosion and box-blur window of the count smoothing.
    pub kernel_size: usize,
    /// Lower bound on the divisor of the mean score map.
    pub min_count: f64,
    pub dog_sigma1: f64,
    pub dog_sigma2: f64,
    /// DoG peak floor for map candidates.
    pub peak_min: f64,
    /// Map candidates closer than this (meters) are dropped.
    pub near_reject: f64,
    /// Chebyshev radius of every maxima search.
    pub maxima_radius: usize,
    /// Gaussian sigma applied to `priority × mean`.
    pub blur_sigma: f64,
    /// Final mean-score threshold.
    pub score_threshold: f64,
    /// Pixels within which a map candidate and a detector hit coincide.
    pub coincidence_tolerance: u32,
    pub max_range: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            view_threshold: 10,
            kernel_size: 9,
            min_count: 1.0,
            dog_sigma1: 1.0,
            dog_sigma2: 1.6,
            peak_min: 0.01,
            near_reject: 0.5,
            maxima_radius: 2,
            blur_sigma: 1.0,
            score_threshold: 0.05,
            coincidence_tolerance: 1,
            max_range: crate::voxelmap::DEFAULT_MAX_RANGE,
        }
    }
}

impl LabelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("label parameters: {m}")));
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd");
        }
        if !(self.min_count > 0.0) {
            return bad("min_count must be positive");
        }
        if !(self.dog_sigma1 > 0.0 && self.dog_sigma1 < self.dog_sigma2) {
            return bad("need 0 < dog_sigma1 < dog_sigma2");
        }
        if !(self.blur_sigma > 0.0) || !(self.max_range > 0.0) {
            return bad("blur_sigma and max_range must be positive");
        }
        if !(self.near_reject >= 0.0) || !(self.score_threshold >= 0.0) || !(self.peak_min >= 0.0) {
            return bad("thresholds must be nonnegative");
        }
        if self.maxima_radius == 0 {
            return bad("maxima_radius must be at least 1");
        }
        Ok(())
    }
}

/// Per-pixel raycast of the painted map: score sum and view count of the
/// first cell hit, zero on a miss.
pub fn render_score_and_count(
    map: &VoxelMap,
    intr: &CameraIntrinsics,
    pose: &Pose,
    max_range: f64,
) -> (ScoreGrid, CountGrid) {
    let (w, h) = intr.dims();
    let mut score = ScoreGrid::zeros(w, h);
    let mut count = CountGrid::zeros(w, h);
    score
        .as_mut_slice()
        .par_chunks_mut(w)
        .zip(count.as_mut_slice().par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (srow, crow))| {
            for x in 0..w {
                let ray = pixel_ray((x as f64, y as f64), intr, pose);
                if let Some((s, v)) = map.query(&ray, max_range) {
                    srow[x] = s;
                    crow[x] = v as f64;
                }
            }
        });
    (score, count)
}

/// Erodes the count map, then box-blurs it, both with a `kernel`-wide
/// window.
pub fn smooth_count(count: &CountGrid, kernel: usize) -> Result<CountGrid> {
    box_blur(&erode_min(count, kernel)?, kernel)
}

/// `score / max(count, min_count)`, plus the mask of pixels whose smoothed
/// count is below `min_count`.
pub fn mean_score(
    score: &ScoreGrid,
    smoothed: &CountGrid,
    min_count: f64,
) -> Result<(ScoreGrid, Grid<bool>)> {
    score.ensure_same_dims(smoothed)?;
    let (w, h) = score.dims();
    let mean = ScoreGrid::from_vec(
        w,
        h,
        score
            .as_slice()
            .iter()
            .zip(smoothed.as_slice())
            .map(|(s, c)| s / c.max(min_count))
            .collect(),
    )?;
    let flagged = smoothed.map(|c| c < min_count);
    Ok((mean, flagged))
}

/// DoG peaks of the mean score map above `peak_min`, dropping those nearer
/// than `near_reject` or without valid depth.
pub fn map_candidates(
    mean: &ScoreGrid,
    depth: &DepthMap,
    params: &LabelParams,
) -> Result<Vec<Detection>> {
    if mean.dims() != depth.dims() {
        return Err(Error::SizeMismatch {
            expected: mean.dims(),
            actual: depth.dims(),
        });
    }
    let dog = difference_of_gaussians(mean, params.dog_sigma1, params.dog_sigma2)?;
    let floor = params.peak_min.max(f64::MIN_POSITIVE);
    Ok(local_maxima(&dog, params.maxima_radius, floor)
        .into_iter()
        .filter(|d| {
            let (x, y) = d.pixel();
            depth.valid(x, y).is_some_and(|z| z >= params.near_reject)
        })
        .collect())
}

/// Fuses map candidates `ds` and detector hits `da` into priorities:
/// 3 for coincident pairs (at the map candidate's pixel), 2 for map-only,
/// 1 for detector-only, 0 elsewhere.
pub fn priority_map(
    ds: &[Detection],
    da: &[Detection],
    width: usize,
    height: usize,
    tolerance: u32,
) -> PriorityGrid {
    let tol = tolerance as i64;
    let in_a: HashSet<(i64, i64)> = da.iter().map(|d| (d.x as i64, d.y as i64)).collect();
    let in_s: HashSet<(i64, i64)> = ds.iter().map(|d| (d.x as i64, d.y as i64)).collect();
    let near = |set: &HashSet<(i64, i64)>, x: i64, y: i64| {
        (-tol..=tol).any(|dy| (-tol..=tol).any(|dx| set.contains(&(x + dx, y + dy))))
    };
    let mut c = PriorityGrid::filled(width, height, 0);
    let mut raise = |x: i64, y: i64, v: u8| {
        if x >= 0
            && y >= 0
            && (x as usize) < width
            && (y as usize) < height
            && c.get(x as usize, y as usize) < v
        {
            c.set(x as usize, y as usize, v);
        }
    };
    for &(x, y) in &in_s {
        raise(x, y, if near(&in_a, x, y) { 3 } else { 2 });
    }
    for &(x, y) in &in_a {
        if !near(&in_s, x, y) {
            raise(x, y, 1);
        }
    }
    c
}

/// Maxima of the blurred `C·S`, valued from `S` and thresholded.
///
/// Provenance comes from the highest priority within the blur support of
/// the peak.
pub fn filter_double_points(
    c: &PriorityGrid,
    s: &ScoreGrid,
    params: &LabelParams,
) -> Result<Vec<Label>> {
    c.ensure_same_dims(s)?;
    let (w, h) = s.dims();
    let cs = ScoreGrid::from_vec(
        w,
        h,
        c.as_slice()
            .iter()
            .zip(s.as_slice())
            .map(|(&p, &v)| p as f64 * v)
            .collect(),
    )?;
    let blurred = gaussian_blur(&cs, params.blur_sigma)?;
    let reach = (3.0 * params.blur_sigma).ceil() as isize;
    let mut out = Vec::new();
    for peak in local_maxima(&blurred, params.maxima_radius, f64::EPSILON) {
        let (x, y) = peak.pixel();
        let value = s.get(x, y);
        if !(value >= params.score_threshold) {
            continue;
        }
        let mut best = 0u8;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (qx, qy) = (x as isize + dx, y as isize + dy);
                if qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h {
                    best = best.max(c.get(qx as usize, qy as usize));
                }
            }
        }
        out.push(Label {
            detection: Detection::new(peak.x, peak.y, value),
            provenance: Provenance::from_priority(best),
        });
    }
    Ok(out)
}

/// Replaces labels in the low-view region (raw count below `threshold`) by
/// the fallback detections found there.
pub fn view_fallback(
    labels: Vec<Label>,
    raw_count: &CountGrid,
    fallback: Option<&DetectionSet>,
    threshold: u32,
) -> Vec<Label> {
    let low = |x: u32, y: u32| raw_count.get(x as usize, y as usize) < threshold as f64;
    let mut out: Vec<Label> = labels
        .into_iter()
        .filter(|l| !low(l.detection.x, l.detection.y))
        .collect();
    if let Some(fb) = fallback {
        let (w, h) = raw_count.dims();
        out.extend(
            fb.detections
                .iter()
                .filter(|d| (d.x as usize) < w && (d.y as usize) < h && low(d.x, d.y))
                .map(|&d| Label {
                    detection: d,
                    provenance: Provenance::Fallback,
                }),
        );
    }
    out.sort_by_key(|l| (l.detection.y, l.detection.x, l.provenance));
    out.dedup_by_key(|l| (l.detection.y, l.detection.x));
    out
}

/// Geometry of one frame as the labeler needs it.
#[derive(Debug, Clone, Copy)]
pub struct FrameGeometry<'a> {
    pub frame_index: usize,
    pub intrinsics: &'a CameraIntrinsics,
    pub pose: &'a Pose,
    pub depth: &'a DepthMap,
}

/// Every intermediate raster of one frame's labeling.
#[derive(Debug, Clone)]
pub struct LabelStages {
    pub score: ScoreGrid,
    pub count: CountGrid,
    pub smoothed_count: CountGrid,
    pub mean: ScoreGrid,
    pub low_count: Grid<bool>,
    pub map_candidates: Vec<Detection>,
    pub detector_hits: Vec<Detection>,
    pub priority: PriorityGrid,
    pub labels: LabelSet,
}

pub fn generate_labels_staged(
    map: &VoxelMap,
    frame: FrameGeometry<'_>,
    detector_sets: &[&DetectionSet],
    fallback: Option<&DetectionSet>,
    params: &LabelParams,
) -> Result<LabelStages> {
    params.validate()?;
    let (w, h) = frame.intrinsics.dims();
    if frame.depth.dims() != (w, h) {
        return Err(Error::SizeMismatch {
            expected: (w, h),
            actual: frame.depth.dims(),
        });
    }
    let (score, count) =
        render_score_and_count(map, frame.intrinsics, frame.pose, params.max_range);
    let smoothed_count = smooth_count(&count, params.kernel_size)?;
    let (mean, low_count) = mean_score(&score, &smoothed_count, params.min_count)?;
    let candidates = map_candidates(&mean, frame.depth, params)?;
    let mut hits: Vec<Detection> = detector_sets
        .iter()
        .flat_map(|s| s.detections.iter().copied())
        .filter(|d| (d.x as usize) < w && (d.y as usize) < h)
        .collect();
    hits.sort_by_key(|d| (d.y, d.x));
    hits.dedup_by_key(|d| (d.y, d.x));
    let priority = priority_map(&candidates, &hits, w, h, params.coincidence_tolerance);
    let kept = filter_double_points(&priority, &mean, params)?;
    let labels = view_fallback(kept, &count, fallback, params.view_threshold);
    Ok(LabelStages {
        score,
        count,
        smoothed_count,
        mean,
        low_count,
        map_candidates: candidates,
        detector_hits: hits,
        priority,
        labels: LabelSet {
            frame_index: frame.frame_index,
            labels,
        },
    })
}

pub fn generate_labels(
    map: &VoxelMap,
    frame: FrameGeometry<'_>,
    detector_sets: &[&DetectionSet],
    fallback: Option<&DetectionSet>,
    params: &LabelParams,
) -> Result<LabelSet> {
    generate_labels_staged(map, frame, detector_sets, fallback, params).map(|s| s.labels)
}

pub fn format_label_file<'a>(sets: impl IntoIterator<Item = &'a LabelSet>) -> String {
    let mut s = String::from("# frame_index,x,y,confidence,provenance\n");
    for set in sets {
        for l in &set.labels {
            let d = l.detection;
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                set.frame_index, d.x, d.y, d.confidence, l.provenance
            );
        }
    }
    s
}

/// Parses a label file into sets sorted by frame index.
pub fn parse_label_file(path: &Path, text: &str) -> Result<Vec<LabelSet>> {
    let mut by_frame: std::collections::BTreeMap<usize, Vec<Label>> = Default::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::parse(path, i + 1, m);
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let frame: usize = f[0].parse().map_err(|e| err(format!("frame index: {e}")))?;
        let x: u32 = f[1].parse().map_err(|e| err(format!("x: {e}")))?;
        let y: u32 = f[2].parse().map_err(|e| err(format!("y: {e}")))?;
        let c: f64 = f[3].parse().map_err(|e| err(format!("confidence: {e}")))?;
        if !(c >= 0.0) || !c.is_finite() {
            return Err(err(format!(
                "confidence must be finite and nonnegative, got {c}"
            )));
        }
        let provenance: Provenance = f[4].parse().map_err(err)?;
        by_frame.entry(frame).or_default().push(Label {
            detection: Detection::new(x, y, c),
            provenance,
        });
    }
    Ok(by_frame
        .into_iter()
        .map(|(frame_index, labels)| LabelSet {
            frame_index,
            labels,
        })
        .collect())
}

pub fn load_label_file(path: &Path) -> Result<Vec<LabelSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_file(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    fn p() -> LabelParams {
        LabelParams::default()
    }

    #[test]
    fn smoothing_constant_and_hole() {
        let c = CountGrid::filled(30, 30, 20.0);
        assert_eq!(smooth_count(&c, 9).unwrap(), c);
        let mut holed = c.clone();
        holed.set(15, 15, 0.0);
        let s = smooth_count(&holed, 9).unwrap();
        // Erosion spreads the hole to a 9x9 block; blur widens it further.
        let depressed = s.as_slice().iter().filter(|&&v| v < 20.0).count();
        assert!(depressed >= 81);
        let blur_only = box_blur(&holed, 9).unwrap();
        assert!(s
            .as_slice()
            .iter()
            .zip(blur_only.as_slice())
            .all(|(a, b)| a <= b));
    }

    #[test]
    fn mean_score_division_and_guard() {
        let score = ScoreGrid::from_vec(3, 1, vec![0.5, 0.0, 0.3]).unwrap();
        let count = CountGrid::from_vec(3, 1, vec![10.0, 4.0, 0.5]).unwrap();
        let (m, flag) = mean_score(&score, &count, 1.0).unwrap();
        assert!((m.get(0, 0) - 0.05).abs() < 1e-15);
        assert_eq!(m.get(1, 0), 0.0);
        assert!((m.get(2, 0) - 0.3).abs() < 1e-15);
        assert_eq!(flag.as_slice(), &[false, false, true]);
        assert!(mean_score(&score, &CountGrid::zeros(2, 1), 1.0).is_err());
    }

    fn bump(w: usize, h: usize, cx: f64, cy: f64, amp: f64, sigma: f64) -> ScoreGrid {
        ScoreGrid::from_fn(w, h, |x, y| {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            amp * (-r2 / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn candidates_from_single_peak() {
        let mean = bump(40, 30, 20.0, 12.0, 0.5, 1.0);
        let depth = DepthMap::new(40, 30, vec![3.0; 1200]).unwrap();
        let c = map_candidates(&mean, &depth, &p()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].x, c[0].y), (20, 12));
        let near = DepthMap::new(40, 30, vec![0.4; 1200]).unwrap();
        assert!(map_candidates(&mean, &near, &p()).unwrap().is_empty());
        assert!(map_candidates(&ScoreGrid::zeros(40, 30), &depth, &p())
            .unwrap()
            .is_empty());
        let invalid = DepthMap::zeros(40, 30);
        assert!(map_candidates(&mean, &invalid, &p()).unwrap().is_empty());
    }

    #[test]
    fn near_rejection_threshold_is_configurable() {
        let mean = bump(40, 30, 20.0, 12.0, 0.5, 1.0);
        let depth = DepthMap::new(40, 30, vec![0.45; 1200]).unwrap();
        let mut params = p();
        assert!(map_candidates(&mean, &depth, &params).unwrap().is_empty());
        params.near_reject = 0.4;
        assert_eq!(map_candidates(&mean, &depth, &params).unwrap().len(), 1);
    }

    #[test]
    fn priority_cases() {
        let ds = [Detection::new(5, 5, 1.0), Detection::new(10, 3, 1.0)];
        let da = [Detection::new(6, 5, 1.0), Detection::new(1, 1, 1.0)];
        let c = priority_map(&ds, &da, 12, 8, 1);
        assert_eq!(c.get(5, 5), 3);
        // Coincident detector hit is absorbed into the map candidate.
        assert_eq!(c.get(6, 5), 0);
        assert_eq!(c.get(10, 3), 2);
        assert_eq!(c.get(1, 1), 1);
        assert_eq!(c.as_slice().iter().filter(|&&v| v > 0).count(), 3);
        // Exact membership when the tolerance is zero.
        let c0 = priority_map(&ds, &da, 12, 8, 0);
        assert_eq!((c0.get(5, 5), c0.get(6, 5)), (2, 1));
    }

    #[test]
    fn double_detection_collapses() {
        let s = bump(30, 30, 15.0, 15.0, 0.3, 1.5);
        let mut c = PriorityGrid::filled(30, 30, 0);
        c.set(15, 15, 1);
        c.set(16, 15, 1);
        let labels = filter_double_points(&c, &s, &p()).unwrap();
        assert_eq!(labels.len(), 1);
        assert!(labels[0].detection.x == 15 || labels[0].detection.x == 16);
    }

    #[test]
    fn isolated_pixel_and_threshold() {
        let mut c = PriorityGrid::filled(20, 20, 0);
        c.set(8, 9, 3);
        let s = ScoreGrid::filled(20, 20, 0.2);
        let labels = filter_double_points(&c, &s, &p()).unwrap();
        assert_eq!(labels.len(), 1);
        assert_eq!((labels[0].detection.x, labels[0].detection.y), (8, 9));
        assert_eq!(labels[0].detection.confidence, 0.2);
        assert_eq!(labels[0].provenance, Provenance::Both);
        let low = ScoreGrid::filled(20, 20, 0.04);
        assert!(filter_double_points(&c, &low, &p()).unwrap().is_empty());
        let mut params = p();
        params.score_threshold = 0.03;
        assert_eq!(filter_double_points(&c, &low, &params).unwrap().len(), 1);
    }

    fn label(x: u32, y: u32) -> Label {
        Label {
            detection: Detection::new(x, y, 0.1),
            provenance: Provenance::Both,
        }
    }

    #[test]
    fn fallback_rules() {
        let labels = vec![label(2, 2), label(7, 3)];
        let fb = DetectionSet::new(
            0,
            "gftt",
            vec![Detection::new(7, 4, 0.5), Detection::new(1, 1, 0.5)],
        );
        let high = CountGrid::filled(10, 6, 10.0);
        assert_eq!(view_fallback(labels.clone(), &high, Some(&fb), 10), labels);

        let mut partial = high.clone();
        for y in 0..6 {
            for x in 5..10 {
                partial.set(x, y, 9.0);
            }
        }
        let out = view_fallback(labels.clone(), &partial, Some(&fb), 10);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], labels[0]);
        assert_eq!(
            (out[1].detection.x, out[1].detection.y, out[1].provenance),
            (7, 4, Provenance::Fallback)
        );
        // A threshold of 9 keeps the region.
        assert_eq!(
            view_fallback(labels.clone(), &partial, Some(&fb), 9),
            labels
        );

        let unseen = CountGrid::zeros(10, 6);
        let out = view_fallback(labels, &unseen, Some(&fb), 10);
        assert!(out.iter().all(|l| l.provenance == Provenance::Fallback));
        assert_eq!(out.len(), 2);
    }

    proptest! {
        #[test]
        fn priority_values_bounded(
            ds in proptest::collection::vec((0u32..16, 0u32..12), 0..20),
            da in proptest::collection::vec((0u32..16, 0u32..12), 0..20),
            tol in 0u32..3,
        ) {
            let ds: Vec<_> = ds.into_iter().map(|(x, y)| Detection::new(x, y, 1.0)).collect();
            let da: Vec<_> = da.into_iter().map(|(x, y)| Detection::new(x, y, 1.0)).collect();
            let c = priority_map(&ds, &da, 16, 12, tol);
            prop_assert!(c.as_slice().iter().all(|&v| v <= 3));
            for d in &ds {
                prop_assert!(c.get(d.x as usize, d.y as usize) >= 2);
            }
        }

        #[test]
        fn mean_score_bounds(vals in proptest::collection::vec((0.0f64..5.0, 0.0f64..30.0), 12)) {
            let score = ScoreGrid::from_vec(4, 3, vals.iter().map(|v| v.0).collect()).unwrap();
            let count = CountGrid::from_vec(4, 3, vals.iter().map(|v| v.1).collect()).unwrap();
            let (m, _) = mean_score(&score, &count, 1.0).unwrap();
            for (i, v) in m.as_slice().iter().enumerate() {
                prop_assert!(*v >= 0.0 && *v <= score.as_slice()[i] / 1.0 + 1e-15);
            }
        }

        #[test]
        fn labels_meet_threshold_and_separation(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = ScoreGrid::from_fn(24, 20, |_, _| rng.random_range(0.0..0.2));
            let c = PriorityGrid::from_fn(24, 20, |_, _| if rng.random_bool(0.1) { rng.random_range(1..=3) } else { 0 });
            let labels = filter_double_points(&c, &s, &p()).unwrap();
            for (i, a) in labels.iter().enumerate() {
                prop_assert!(a.detection.confidence >= 0.05);
                for b in &labels[i + 1..] {
                    let dx = (a.detection.x as i64 - b.detection.x as i64).abs();
                    let dy = (a.detection.y as i64 - b.detection.y as i64).abs();
                    prop_assert!(dx.max(dy) > 2);
                }
            }
        }
    }

    /// Two cameras looking at a wall; the overlap is seen twice.
    #[test]
    fn two_frame_counts_and_self_consistency() {
        // 5 cm cells: coarser than the 2 cm pixel footprint, so every cell
        // in view is hit by some ray of each frame.
        let cells = (-30..30).flat_map(|x| (-30..30).map(move |y| [x, y, 40]));
        let map = VoxelMap::from_cells(0.05, cells).unwrap();
        let intr = CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap();
        let a = Pose::identity();
        let b = Pose::from_translation(Vec3::new(0.3, 0.0, 0.0));
        map.visibility_pass(&intr, &a, 20.0, 1);
        map.visibility_pass(&intr, &b, 20.0, 1);
        let set = DetectionSet::new(0, "harris", vec![Detection::new(40, 20, 1.0)]);
        map.paint_frame(&intr, &a, &set, 20.0);
        let (score, count) = render_score_and_count(&map, &intr, &a, 20.0);
        assert!(score.get(40, 20) >= 1.0 - 1e-9);
        // Frame b sees x in [0.3 - 0.63, 0.3 + 0.65]; pixel 50 of a is at
        // x = 0.37 m, pixel 5 at -0.53 m.
        assert_eq!(count.get(50, 20), 2.0);
        assert_eq!(count.get(5, 20), 1.0);
        let away = Pose::new(
            crate::geometry::axis_angle(&Vec3::x(), std::f64::consts::PI),
            Vec3::zeros(),
        )
        .unwrap();
        let (s0, c0) = render_score_and_count(&map, &intr, &away, 20.0);
        assert_eq!(s0.sum() + c0.sum(), 0.0);
    }

    #[test]
    fn label_file_roundtrip() {
        let sets = vec![LabelSet {
            frame_index: 3,
            labels: vec![
                label(1, 2),
                Label {
                    detection: Detection::new(4, 5, 0.25),
                    provenance: Provenance::Fallback,
                },
            ],
        }];
        let text = format_label_file(&sets);
        assert_eq!(parse_label_file(Path::new("l"), &text).unwrap(), sets);
        assert!(matches!(
            parse_label_file(Path::new("l"), "# h\n1,2,3,0.5,sometimes\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
