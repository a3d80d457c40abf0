//! Detector repeatability under true viewpoint change.
//!
//! Candidate detections are carried into the query view through the
//! candidate depth and the relative pose, kept only where the query depth
//! agrees, and every visible query detection is binned by the rounded
//! distance to the nearest carried-over candidate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::{
    relative_transform, CameraIntrinsics, DepthMap, Detection, Mat3, Pose, Vec3,
};
use crate::imageproc::nms_cap;
use crate::raster::Grid;

/// Per-pixel rounded distance to the nearest candidate, capped.
pub type DistanceGrid = Grid<u8>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    /// Keep every n-th frame of a sequence.
    pub frame_stride: usize,
    /// Minimum candidate→query overlap of a retained pair.
    pub min_overlap: f64,
    pub eps_floor_m: f64,
    pub eps_rel: f64,
    /// Detections kept per frame after suppression.
    pub max_detections: usize,
    /// Suppression radius in pixels.
    pub nms_radius: f64,
    /// Distances at or beyond this go to the unmatched bin.
    pub max_distance: usize,
    /// Pixel stride of the overlap estimate.
    pub overlap_stride: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            frame_stride: 30,
            min_overlap: 0.10,
            eps_floor_m: 0.05,
            eps_rel: 0.02,
            max_detections: 2000,
            nms_radius: 2.0,
            max_distance: 10,
            overlap_stride: 4,
        }
    }
}

impl EvalParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| {
            Err(Error::InvalidArgument(format!(
                "evaluation parameters: {m}"
            )))
        };
        if self.frame_stride == 0 || self.overlap_stride == 0 {
            return bad("strides must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.min_overlap) {
            return bad("min_overlap must lie in [0, 1]");
        }
        if !(self.eps_floor_m >= 0.0)
            || !(self.eps_rel >= 0.0)
            || self.eps_floor_m + self.eps_rel <= 0.0
        {
            return bad("depth tolerance must be positive");
        }
        if !(1..=250).contains(&self.max_distance) {
            return bad("max_distance must lie in 1..=250");
        }
        if !(self.nms_radius >= 0.0) {
            return bad("nms_radius must be nonnegative");
        }
        Ok(())
    }

    /// Depth-agreement tolerance at a query depth.
    pub fn eps(&self, depth: f64) -> f64 {
        self.eps_floor_m.max(self.eps_rel * depth)
    }
}

/// Pose and depth of one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub index: usize,
    pub pose: &'a Pose,
    pub depth: &'a DepthMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub query: usize,
    pub candidate: usize,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    /// Counts for distances `0..max_distance`.
    pub bins: Vec<u64>,
    pub unmatched: u64,
    pub visible_queries: u64,
}

impl DistanceHistogram {
    pub fn new(max_distance: usize) -> Self {
        Self {
            bins: vec![0; max_distance],
            unmatched: 0,
            visible_queries: 0,
        }
    }

    pub fn record(&mut self, distance: usize) {
        self.visible_queries += 1;
        match self.bins.get_mut(distance) {
            Some(b) => *b += 1,
            None => self.unmatched += 1,
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.bins.iter().sum::<u64>() + self.unmatched == self.visible_queries
    }
}

/// Transfers one pixel with its depth through `(r, t)` into the other
/// camera; returns the landing pixel when it is in bounds, in front, and
/// consistent with the other depth map.
#[inline]
fn transfer(
    x: f64,
    y: f64,
    z: f64,
    intr: &CameraIntrinsics,
    r: &Mat3,
    t: &Vec3,
    other: &DepthMap,
    params: &EvalParams,
) -> Option<(f64, f64)> {
    let p = Vec3::new((x - intr.cx) / intr.fx * z, (y - intr.cy) / intr.fy * z, z);
    let q = r * p + t;
    if !(q.z > 0.0) {
        return None;
    }
    let (bx, by) = intr.project_camera(&q);
    let (px, py) = intr.pixel_of(bx, by)?;
    let dq = other.valid(px, py)?;
    ((q.z - dq).abs() < params.eps(dq)).then_some((bx, by))
}

/// Carries detections of `from` into `to`. `None` marks detections that
/// are not visible in `to` (no depth, out of bounds, behind, or occluded).
pub fn backproject_detections(
    detections: &[Detection],
    from: FrameView<'_>,
    to: FrameView<'_>,
    intr: &CameraIntrinsics,
    params: &EvalParams,
) -> Vec<Option<(f64, f64)>> {
    let (r, t) = relative_transform(from.pose, to.pose);
    detections
        .iter()
        .map(|d| {
            let (x, y) = d.pixel();
            let z = from.depth.valid(x, y)?;
            transfer(x as f64, y as f64, z, intr, &r, &t, to.depth, params)
        })
        .collect()
}

/// Fraction of sampled valid candidate pixels that land depth-consistently
/// in the query view.
pub fn frame_overlap(
    candidate: FrameView<'_>,
    query: FrameView<'_>,
    intr: &CameraIntrinsics,
    params: &EvalParams,
) -> f64 {
    let (r, t) = relative_transform(candidate.pose, query.pose);
    let stride = params.overlap_stride.max(1);
    let (w, h) = candidate.depth.dims();
    let (mut valid, mut landed) = (0usize, 0usize);
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            if let Some(z) = candidate.depth.valid(x, y) {
                valid += 1;
                if transfer(x as f64, y as f64, z, intr, &r, &t, query.depth, params).is_some() {
                    landed += 1;
                }
            }
        }
    }
    if valid == 0 {
        0.0
    } else {
        landed as f64 / valid as f64
    }
}

/// Every `frame_stride`-th frame (by position), all ordered pairs with
/// enough overlap, in (query, candidate) order.
pub fn select_pairs(
    frames: &[FrameView<'_>],
    intr: &CameraIntrinsics,
    params: &EvalParams,
) -> Vec<FramePair> {
    let kept: Vec<&FrameView<'_>> = frames.iter().step_by(params.frame_stride.max(1)).collect();
    let ordered: Vec<(usize, usize)> = (0..kept.len())
        .flat_map(|q| {
            (0..kept.len())
                .filter(move |&c| c != q)
                .map(move |c| (q, c))
        })
        .collect();
    ordered
        .par_iter()
        .filter_map(|&(q, c)| {
            let overlap = frame_overlap(*kept[c], *kept[q], intr, params);
            (overlap >= params.min_overlap).then_some(FramePair {
                query: kept[q].index,
                candidate: kept[c].index,
                overlap,
            })
        })
        .collect()
}

/// Smallest `k` with `round(sqrt(d2)) == k`, i.e. `k² - k < d2 ≤ k² + k`.
#[inline]
fn rounded_root(d2: i64, cap: u8) -> u8 {
    let mut k: i64 = 0;
    while k < cap as i64 && d2 > k * k + k {
        k += 1;
    }
    k as u8
}

/// `D(p) = min_q round(|p - q|)` capped at `max_r`.
///
/// Computed from the exact squared Euclidean distance transform (separable
/// lower-envelope algorithm in integer arithmetic); rounding is monotone, so
/// rounding the minimum distance equals the minimum of rounded distances.
pub fn distance_map(
    candidates: &[(usize, usize)],
    width: usize,
    height: usize,
    max_r: u8,
) -> DistanceGrid {
    let mut out = DistanceGrid::filled(width, height, max_r);
    if candidates.is_empty() || width == 0 || height == 0 {
        return out;
    }
    let inf = (width + height + 1) as i64;
    // Column pass: vertical distance to the nearest candidate in the column.
    let mut g = vec![inf; width * height];
    for &(x, y) in candidates {
        if x < width && y < height {
            g[y * width + x] = 0;
        }
    }
    for x in 0..width {
        for y in 1..height {
            let above = g[(y - 1) * width + x];
            if g[y * width + x] > above + 1 {
                g[y * width + x] = above + 1;
            }
        }
        for y in (0..height - 1).rev() {
            let below = g[(y + 1) * width + x];
            if g[y * width + x] > below + 1 {
                g[y * width + x] = below + 1;
            }
        }
    }
    // Row pass: lower envelope of parabolas (x - i)² + g(i)².
    let mut s = vec![0usize; width];
    let mut t = vec![0i64; width];
    let table: Vec<u8> = (0..=(max_r as i64 * max_r as i64 + max_r as i64))
        .map(|d2| rounded_root(d2, max_r))
        .collect();
    for y in 0..height {
        let row = &g[y * width..(y + 1) * width];
        let f = |x: i64, i: usize| (x - i as i64) * (x - i as i64) + row[i] * row[i];
        let sep = |i: usize, u: usize| {
            let (i, u) = (i as i64, u as i64);
            let num = u * u - i * i + row[u as usize] * row[u as usize]
                - row[i as usize] * row[i as usize];
            num.div_euclid(2 * (u - i))
        };
        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..width {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let w = 1 + sep(s[q as usize], u);
                if w < width as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = w;
                }
            }
        }
        let orow = &mut out.as_mut_slice()[y * width..(y + 1) * width];
        for u in (0..width).rev() {
            let d2 = f(u as i64, s[q as usize]);
            orow[u] = table.get(d2 as usize).copied().unwrap_or(max_r);
            if u as i64 == t[q as usize] {
                q -= 1;
            }
        }
    }
    out
}

/// Bins the visible query detections by their distance-map value.
pub fn pair_histogram(
    queries: &[Detection],
    query_visible: &[bool],
    backprojected: &[Option<(f64, f64)>],
    intr: &CameraIntrinsics,
    max_distance: usize,
) -> DistanceHistogram {
    let cands: Vec<(usize, usize)> = backprojected
        .iter()
        .flatten()
        .filter_map(|&(x, y)| intr.pixel_of(x, y))
        .collect();
    let mut hist = DistanceHistogram::new(max_distance);
    let dmap = (!cands.is_empty())
        .then(|| distance_map(&cands, intr.width, intr.height, max_distance as u8));
    for (d, _) in queries.iter().zip(query_visible).filter(|(_, &v)| v) {
        match &dmap {
            Some(m) => hist.record(m.get(d.x as usize, d.y as usize) as usize),
            None => hist.record(max_distance),
        }
    }
    hist
}

/// Strongest detections after suppression, as evaluated.
pub fn cap_detections(detections: &[Detection], params: &EvalParams) -> Vec<Detection> {
    nms_cap(detections, params.nms_radius, params.max_detections)
}

/// Histogram of one ordered pair; detections must already be capped.
pub fn evaluate_pair(
    query: FrameView<'_>,
    query_dets: &[Detection],
    candidate: FrameView<'_>,
    candidate_dets: &[Detection],
    intr: &CameraIntrinsics,
    params: &EvalParams,
) -> DistanceHistogram {
    let carried = backproject_detections(candidate_dets, candidate, query, intr, params);
    let visible: Vec<bool> = backproject_detections(query_dets, query, candidate, intr, params)
        .iter()
        .map(Option::is_some)
        .collect();
    pair_histogram(query_dets, &visible, &carried, intr, params.max_distance)
}

/// Fig.-style summary over pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub pairs: usize,
    /// Pairs with at least one visible query (the percentage denominator).
    pub pairs_with_queries: usize,
    /// Mean count per bin; the last entry is the unmatched bin.
    pub mean_count: Vec<f64>,
    /// Mean of per-pair percentages; the last entry is the unmatched bin.
    pub mean_percent: Vec<f64>,
    /// Sum of mean counts of bins 0–3.
    pub repeatable_within_3px: f64,
}

impl Report {
    pub fn max_distance(&self) -> usize {
        self.mean_count.len() - 1
    }
}

pub fn aggregate(histograms: &[DistanceHistogram]) -> Result<Report> {
    let first = histograms
        .first()
        .ok_or(Error::Empty("no pair histograms"))?;
    let nb = first.bins.len();
    if histograms.iter().any(|h| h.bins.len() != nb) {
        return Err(Error::InvalidArgument(
            "histograms with different bin counts".into(),
        ));
    }
    let row = |h: &DistanceHistogram| -> Vec<u64> {
        let mut v = h.bins.clone();
        v.push(h.unmatched);
        v
    };
    let mut totals = vec![0u64; nb + 1];
    let mut pct = vec![0.0f64; nb + 1];
    let mut with_queries = 0usize;
    // Sequential, in input order, so the result is independent of how the
    // histograms were produced.
    for h in histograms {
        let r = row(h);
        for (t, v) in totals.iter_mut().zip(&r) {
            *t += v;
        }
        if h.visible_queries > 0 {
            with_queries += 1;
            for (p, v) in pct.iter_mut().zip(&r) {
                *p += 100.0 * *v as f64 / h.visible_queries as f64;
            }
        }
    }
    let n = histograms.len() as f64;
    let mean_count: Vec<f64> = totals.iter().map(|&t| t as f64 / n).collect();
    let mean_percent = pct
        .iter()
        .map(|&p| {
            if with_queries == 0 {
                0.0
            } else {
                p / with_queries as f64
            }
        })
        .collect();
    let repeatable_within_3px = mean_count.iter().take(4.min(nb)).sum();
    Ok(Report {
        pairs: histograms.len(),
        pairs_with_queries: with_queries,
        mean_count,
        mean_percent,
        repeatable_within_3px,
    })
}

/// Evaluates every pair in parallel; output order follows `pairs`.
pub fn evaluate_pairs<'a>(
    pairs: &[FramePair],
    frame: impl Fn(usize) -> Option<FrameView<'a>> + Sync,
    detections: impl Fn(usize) -> &'a [Detection] + Sync,
    intr: &CameraIntrinsics,
    params: &EvalParams,
) -> Result<Vec<DistanceHistogram>> {
    pairs
        .par_iter()
        .map(|p| {
            let q = frame(p.query)
                .ok_or_else(|| Error::Data(format!("pair references unknown frame {}", p.query)))?;
            let c = frame(p.candidate).ok_or_else(|| {
                Error::Data(format!("pair references unknown frame {}", p.candidate))
            })?;
            Ok(evaluate_pair(
                q,
                detections(p.query),
                c,
                detections(p.candidate),
                intr,
                params,
            ))
        })
        .collect()
}

/// Caps every set; frames without a set evaluate with no detections.
pub fn capped_by_frame(
    sets: &[DetectionSet],
    params: &EvalParams,
) -> std::collections::BTreeMap<usize, Vec<Detection>> {
    sets.par_iter()
        .map(|s| (s.frame_index, cap_detections(&s.detections, params)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn report_csv(report: &Report) -> String {
    let mut s = String::from("bin,mean_count,mean_percent\n");
    let nb = report.max_distance();
    for (i, (c, p)) in report
        .mean_count
        .iter()
        .zip(&report.mean_percent)
        .enumerate()
    {
        let label = if i == nb {
            format!("{nb}+")
        } else {
            i.to_string()
        };
        let _ = writeln!(s, "{label},{c},{p}");
    }
    s
}

/// Machine-readable companion of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub detector: String,
    pub params: EvalParams,
    pub pairs: usize,
    pub pairs_with_queries: usize,
    pub repeatable_within_3px: f64,
    pub report: Report,
}

/// Writes `path` (CSV) and `path` with a `.json` extension (summary).
/// Returns the summary path.
pub fn export_report(
    report: &Report,
    detector: &str,
    params: &EvalParams,
    path: &Path,
) -> Result<PathBuf> {
    if report.pairs == 0 || report.mean_count.is_empty() {
        return Err(Error::Empty("report has no pairs"));
    }
    fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))?;
    let summary = ReportSummary {
        detector: detector.to_string(),
        params: params.clone(),
        pairs: report.pairs,
        pairs_with_queries: report.pairs_with_queries,
        repeatable_within_3px: report.repeatable_within_3px,
        report: report.clone(),
    };
    let json_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}

/// Reads the `(mean_count, mean_percent)` columns of a report CSV.
pub fn parse_report_csv(path: &Path, text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "bin,mean_count,mean_percent")) => {}
        _ => {
            return Err(Error::parse(
                path,
                1,
                "missing `bin,mean_count,mean_percent` header",
            ))
        }
    }
    let (mut counts, mut pcts) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::parse(path, i + 1, "expected 3 fields"));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))
        };
        counts.push(num(f[1])?);
        pcts.push(num(f[2])?);
    }
    Ok((counts, pcts))
}
