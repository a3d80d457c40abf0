//! The six batch stages and their resume bookkeeping.
//!
//! Every stage records a manifest of content hashes (its resolved
//! parameters, the files it read, the files it wrote). A rerun with an
//! unchanged manifest is skipped; a rerun over outputs that do not match is
//! refused unless forced.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, LABELS_NAME};
use crate::dataset::{self, Dataset, Frame};
use crate::detectors::{load_external_detections, normalize_frame_confidence, DetectionSet};
use crate::error::Error;
use crate::evaluator::{
    aggregate, capped_by_frame, evaluate_pairs, export_report, select_pairs, DistanceHistogram,
    EvalParams, FramePair, FrameView, ReportSummary,
};
use crate::geometry::{DepthMap, Detection, Vec3};
use crate::labeler::{format_label_file, generate_labels, load_label_file, FrameGeometry};
use crate::synth::{build_scene, photograph, VolumeEstimate};
use crate::voxelmap::{voxelize_mesh, PaintStats, VoxelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Detect,
    Paint,
    Label,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Self::Synth,
        Self::Detect,
        Self::Paint,
        Self::Label,
        Self::Eval,
        Self::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Detect => "detect",
            Self::Paint => "paint",
            Self::Label => "label",
            Self::Eval => "eval",
            Self::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Internal = 3,
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub kind: ExitKind,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

type StageResult<T> = std::result::Result<T, StageError>;

trait Scoped<T> {
    fn scoped(self, stage: Stage) -> StageResult<T>;
}

impl<T> Scoped<T> for crate::Result<T> {
    fn scoped(self, stage: Stage) -> StageResult<T> {
        self.map_err(|e| StageError {
            stage,
            kind: match e {
                Error::InvalidArgument(_) => ExitKind::Usage,
                _ => ExitKind::Data,
            },
            message: e.to_string(),
        })
    }
}

fn fail<T>(stage: Stage, kind: ExitKind, message: impl Into<String>) -> StageResult<T> {
    Err(StageError {
        stage,
        kind,
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub params: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn hash_files(files: &[PathBuf], stage: Stage) -> StageResult<BTreeMap<String, String>> {
    files
        .par_iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e)).scoped(stage)?;
            Ok((p.display().to_string(), sha256_hex(&bytes)))
        })
        .collect()
}

/// Regular files under `root`, sorted.
fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(rd) = fs::read_dir(&dir) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn write_file(path: &Path, bytes: &[u8], stage: Stage) -> StageResult<PathBuf> {
    dataset::write(path, bytes).scoped(stage)?;
    Ok(path.to_path_buf())
}

/// Per-run locations.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            dataset: cfg.general.dataset.clone(),
            output: cfg.general.output.clone(),
        }
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.output.join("manifests").join(format!("{stage}.json"))
    }

    pub fn detections_dir(&self) -> PathBuf {
        self.output.join("detections")
    }

    pub fn detections(&self, name: &str) -> PathBuf {
        self.detections_dir().join(format!("{name}.csv"))
    }

    pub fn map(&self) -> PathBuf {
        self.output.join("map.r3dv")
    }

    pub fn paint_stats(&self) -> PathBuf {
        self.output.join("paint.json")
    }

    pub fn labels(&self) -> PathBuf {
        self.output.join("labels.txt")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output.join("eval")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output.join("report")
    }

    pub fn scene_json(&self) -> PathBuf {
        self.dataset.join("scene.json")
    }

    /// What a stage creates; an existing target without a matching manifest
    /// is never overwritten silently.
    fn targets(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Synth => vec![self.dataset.clone()],
            Stage::Detect => vec![self.detections_dir()],
            Stage::Paint => vec![self.map(), self.paint_stats()],
            Stage::Label => vec![self.labels()],
            Stage::Eval => vec![self.eval_dir()],
            Stage::Report => vec![self.report_dir()],
        }
    }
}

/// Options that do not affect outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Replace outputs that do not match the recorded manifest.
    pub force: bool,
}

/// Runs one stage on a dedicated thread pool of the configured size.
pub fn run_subcommand(stage: Stage, cfg: &RunConfig, opts: RunOptions) -> StageResult<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.general.threads)
        .build()
        .map_err(|e| StageError {
            stage,
            kind: ExitKind::Internal,
            message: format!("thread pool: {e}"),
        })?;
    pool.install(|| run_guarded(stage, cfg, opts))
}

fn stage_params(stage: Stage, cfg: &RunConfig) -> String {
    let v = match stage {
        Stage::Synth => serde_json::json!([cfg.camera, cfg.scene, cfg.synth, cfg.general.seed]),
        Stage::Detect => serde_json::json!([cfg.detect]),
        Stage::Paint => serde_json::json!([
            cfg.paint.resolution,
            cfg.paint.detectors,
            cfg.paint.max_range,
            cfg.paint.visibility_stride
        ]),
        Stage::Label => {
            serde_json::json!([cfg.label, cfg.paint.detectors, cfg.paint.fallback_detector])
        }
        Stage::Eval => serde_json::json!([cfg.eval]),
        Stage::Report => serde_json::json!([cfg.eval.detectors, cfg.to_toml()]),
    };
    sha256_hex(v.to_string().as_bytes())
}

fn run_guarded(stage: Stage, cfg: &RunConfig, opts: RunOptions) -> StageResult<Outcome> {
    let layout = Layout::new(cfg);
    let inputs = stage_inputs(stage, cfg, &layout)?;
    let input_hashes = hash_files(&inputs, stage)?;
    let params = stage_params(stage, cfg);
    let manifest_path = layout.manifest(stage);
    let previous: Option<Manifest> = fs::read(&manifest_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    if let Some(prev) = &previous {
        if prev.params == params && prev.inputs == input_hashes {
            let current: Vec<PathBuf> = prev.outputs.keys().map(PathBuf::from).collect();
            if current.iter().all(|p| p.is_file()) && hash_files(&current, stage)? == prev.outputs {
                info!("{stage}: up to date");
                return Ok(Outcome::UpToDate);
            }
        }
    }
    let existing: Vec<PathBuf> = layout
        .targets(stage)
        .into_iter()
        .filter(|p| p.exists())
        .collect();
    if !existing.is_empty() {
        if !opts.force {
            let why = if previous.is_some() {
                "inputs or parameters changed since they were written"
            } else {
                "no manifest records how they were produced"
            };
            return fail(
                stage,
                ExitKind::Data,
                format!(
                    "refusing to overwrite {} ({why}); rerun with --force",
                    existing
                        .iter()
                        .map(|p| p.display().to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            );
        }
        for p in &existing {
            let r = if p.is_dir() {
                fs::remove_dir_all(p)
            } else {
                fs::remove_file(p)
            };
            r.map_err(|e| Error::io(p, e)).scoped(stage)?;
        }
    }
    let _ = fs::remove_file(&manifest_path);
    fs::create_dir_all(&layout.output)
        .map_err(|e| Error::io(&layout.output, e))
        .scoped(stage)?;
    write_file(
        &layout.output.join("config.toml"),
        cfg.to_toml().as_bytes(),
        stage,
    )?;
    info!("{stage}: running");
    let outputs = match stage {
        Stage::Synth => run_synth(cfg, &layout)?,
        Stage::Detect => run_detect(cfg, &layout)?,
        Stage::Paint => run_paint(cfg, &layout)?,
        Stage::Label => run_label(cfg, &layout)?,
        Stage::Eval => run_eval(cfg, &layout)?,
        Stage::Report => run_report(cfg, &layout)?,
    };
    let manifest = Manifest {
        stage: stage.name().to_string(),
        params,
        inputs: input_hashes,
        outputs: hash_files(&outputs, stage)?,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path, text.as_bytes(), stage)?;
    Ok(Outcome::Ran)
}

fn require(stage: Stage, path: &Path, what: &str) -> StageResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        fail(
            stage,
            ExitKind::Data,
            format!("missing {what}: {}", path.display()),
        )
    }
}

fn open_dataset(stage: Stage, layout: &Layout) -> StageResult<Dataset> {
    require(
        stage,
        &layout.dataset.join(dataset::INTRINSICS_FILE),
        "dataset intrinsics",
    )?;
    require(
        stage,
        &layout.dataset.join(dataset::POSES_FILE),
        "dataset poses",
    )?;
    Dataset::open(&layout.dataset).scoped(stage)
}

/// Names evaluated by `eval` and `report`.
fn eval_names(cfg: &RunConfig, layout: &Layout) -> Vec<String> {
    if !cfg.eval.detectors.is_empty() {
        return cfg.eval.detectors.clone();
    }
    let mut names: Vec<String> = files_under(&layout.detections_dir())
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    if layout.labels().is_file() {
        names.push(LABELS_NAME.to_string());
    }
    names
}

fn detection_source(layout: &Layout, name: &str) -> PathBuf {
    if name == LABELS_NAME {
        layout.labels()
    } else {
        layout.detections(name)
    }
}

fn stage_inputs(stage: Stage, cfg: &RunConfig, layout: &Layout) -> StageResult<Vec<PathBuf>> {
    let ds = &layout.dataset;
    let meta = || {
        vec![
            ds.join(dataset::INTRINSICS_FILE),
            ds.join(dataset::POSES_FILE),
        ]
    };
    let mut v = match stage {
        Stage::Synth => Vec::new(),
        Stage::Detect => {
            let mut v = meta();
            v.extend(files_under(&ds.join(dataset::FRAMES_DIR)));
            v.extend(cfg.detect.external.iter().cloned());
            v
        }
        Stage::Paint => {
            let mut v = meta();
            v.push(ds.join(dataset::MESH_FILE));
            v.extend(cfg.paint.detectors.iter().map(|n| layout.detections(n)));
            v
        }
        Stage::Label => {
            let mut v = meta();
            v.extend(files_under(&ds.join(dataset::DEPTH_DIR)));
            v.push(layout.map());
            v.extend(cfg.paint.detectors.iter().map(|n| layout.detections(n)));
            v.push(layout.detections(&cfg.paint.fallback_detector));
            v
        }
        Stage::Eval => {
            let mut v = meta();
            v.extend(files_under(&ds.join(dataset::DEPTH_DIR)));
            v.extend(
                eval_names(cfg, layout)
                    .iter()
                    .map(|n| detection_source(layout, n)),
            );
            v
        }
        Stage::Report => eval_names(cfg, layout)
            .iter()
            .map(|n| layout.eval_dir().join(format!("{n}.json")))
            .collect(),
    };
    v.sort();
    v.dedup();
    for p in &v {
        require(stage, p, "input")?;
    }
    Ok(v)
}

/// Scene description stored next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub spec: crate::synth::SceneSpec,
    pub corners: Vec<[f64; 3]>,
    pub junctions: Vec<[f64; 3]>,
    pub volume: VolumeEstimate,
    pub requested: usize,
    pub attempts: usize,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn run_synth(cfg: &RunConfig, layout: &Layout) -> StageResult<Vec<PathBuf>> {
    let st = Stage::Synth;
    let intr = cfg.camera.intrinsics().scoped(st)?;
    let scene = build_scene(&cfg.scene).scoped(st)?;
    let map = voxelize_mesh(&scene.mesh, cfg.synth.validity_resolution).scoped(st)?;
    let shot = photograph(
        &scene,
        &map,
        &cfg.synth.photographer,
        &intr,
        cfg.synth.max_range,
        cfg.general.seed,
    )
    .scoped(st)?;
    info!(
        "synth: effective volume {:.2} m³ ({}/{} valid), {} frames",
        shot.volume.effective_volume,
        shot.volume.accepted,
        shot.volume.samples,
        shot.frames.len()
    );
    let frames: Vec<Frame> = shot
        .frames
        .into_iter()
        .map(|f| Frame {
            index: f.index,
            image: f.image,
            depth: f.depth,
            pose: f.pose,
        })
        .collect();
    dataset::write_dataset(&layout.dataset, &intr, Some(&scene.mesh), &frames).scoped(st)?;
    let record = SceneRecord {
        spec: cfg.scene.clone(),
        corners: scene.corners().iter().map(arr).collect(),
        junctions: scene.junctions().iter().map(arr).collect(),
        volume: shot.volume,
        requested: shot.requested,
        attempts: shot.attempts,
    };
    let text = serde_json::to_string_pretty(&record).expect("scene record serializes");
    write_file(&layout.scene_json(), text.as_bytes(), st)?;
    Ok(files_under(&layout.dataset))
}

fn frame_dims(ds: &Dataset) -> BTreeMap<usize, (usize, usize)> {
    ds.indices().map(|i| (i, ds.intrinsics.dims())).collect()
}

fn run_detect(cfg: &RunConfig, layout: &Layout) -> StageResult<Vec<PathBuf>> {
    let st = Stage::Detect;
    let ds = open_dataset(st, layout)?;
    let kinds = &cfg.detect.detectors;
    let per_frame: Vec<Vec<DetectionSet>> = ds
        .indices()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&i| {
            let img = ds.load_image(i).scoped(st)?;
            Ok(kinds
                .iter()
                .map(|&k| DetectionSet::new(i, k.name(), cfg.detect.params.run(k, &img)))
                .collect())
        })
        .collect::<StageResult<_>>()?;
    let mut by_name: BTreeMap<String, Vec<DetectionSet>> = BTreeMap::new();
    for sets in per_frame {
        for s in sets {
            by_name.entry(s.detector.clone()).or_default().push(s);
        }
    }
    if let Some(path) = &cfg.detect.external {
        let loaded = load_external_detections(path, &frame_dims(&ds)).scoped(st)?;
        let mut external: BTreeMap<String, Vec<DetectionSet>> = BTreeMap::new();
        for s in loaded.sets {
            external.entry(s.detector.clone()).or_default().push(s);
        }
        for (name, sets) in external {
            if by_name.contains_key(&name) || name == LABELS_NAME {
                return fail(
                    st,
                    ExitKind::Usage,
                    format!("external detector name `{name}` is reserved"),
                );
            }
            by_name.insert(name, sets);
        }
    }
    let mut out = Vec::new();
    for (name, sets) in &by_name {
        let total: usize = sets.iter().map(DetectionSet::len).sum();
        info!(
            "detect: {name}: {total} detections over {} frames",
            sets.len()
        );
        out.push(write_file(
            &layout.detections(name),
            crate::detectors::format_detection_file(sets).as_bytes(),
            st,
        )?);
    }
    Ok(out)
}

fn load_sets(st: Stage, ds: &Dataset, path: &Path) -> StageResult<Vec<DetectionSet>> {
    Ok(load_external_detections(path, &frame_dims(ds))
        .scoped(st)?
        .sets)
}

/// Summary written next to the painted map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaintRecord {
    pub resolution: f64,
    pub cells: usize,
    pub sets: usize,
    pub painted: usize,
    pub missed: usize,
    pub total_score: f64,
}

fn run_paint(cfg: &RunConfig, layout: &Layout) -> StageResult<Vec<PathBuf>> {
    let st = Stage::Paint;
    let ds = open_dataset(st, layout)?;
    let mesh = ds.load_mesh().scoped(st)?;
    let mut map = voxelize_mesh(&mesh, cfg.paint.resolution).scoped(st)?;
    map.reset();
    let mut sets: BTreeMap<usize, Vec<DetectionSet>> = BTreeMap::new();
    for name in &cfg.paint.detectors {
        for s in load_sets(st, &ds, &layout.detections(name))? {
            sets.entry(s.frame_index)
                .or_default()
                .push(normalize_frame_confidence(&s));
        }
    }
    let mut stats = PaintStats::default();
    let mut painted_sets = 0;
    for (index, pose) in &ds.poses {
        for s in sets
            .get(index)
            .into_iter()
            .flatten()
            .filter(|s| !s.is_empty())
        {
            stats += map.paint_frame(&ds.intrinsics, pose, s, cfg.paint.max_range);
            painted_sets += 1;
        }
        map.visibility_pass(
            &ds.intrinsics,
            pose,
            cfg.paint.max_range,
            cfg.paint.visibility_stride,
        );
    }
    if stats.missed > 0 {
        warn!(
            "paint: {} of {} detection rays missed the map",
            stats.missed,
            stats.painted + stats.missed
        );
    }
    map.save(&layout.map()).scoped(st)?;
    let record = PaintRecord {
        resolution: map.resolution(),
        cells: map.len(),
        sets: painted_sets,
        painted: stats.painted,
        missed: stats.missed,
        total_score: map.total_score(),
    };
    let text = serde_json::to_string_pretty(&record).expect("paint record serializes");
    Ok(vec![
        layout.map(),
        write_file(&layout.paint_stats(), text.as_bytes(), st)?,
    ])
}

fn run_label(cfg: &RunConfig, layout: &Layout) -> StageResult<Vec<PathBuf>> {
    let st = Stage::Label;
    let ds = open_dataset(st, layout)?;
    require(st, &layout.map(), "painted map snapshot")?;
    let map = VoxelMap::load(&layout.map()).scoped(st)?;
    let mut painting: BTreeMap<usize, Vec<DetectionSet>> = BTreeMap::new();
    for name in &cfg.paint.detectors {
        for s in load_sets(st, &ds, &layout.detections(name))? {
            painting.entry(s.frame_index).or_default().push(s);
        }
    }
    let fallback: BTreeMap<usize, DetectionSet> =
        load_sets(st, &ds, &layout.detections(&cfg.paint.fallback_detector))?
            .into_iter()
            .map(|s| (s.frame_index, s))
            .collect();
    let labels = ds
        .poses
        .par_iter()
        .map(|(index, pose)| {
            let depth = ds.load_depth(*index).scoped(st)?;
            let sets: Vec<&DetectionSet> = painting.get(index).into_iter().flatten().collect();
            let frame = FrameGeometry {
                frame_index: *index,
                intrinsics: &ds.intrinsics,
                pose,
                depth: &depth,
            };
            generate_labels(&map, frame, &sets, fallback.get(index), &cfg.label.params).scoped(st)
        })
        .collect::<StageResult<Vec<_>>>()?;
    let total: usize = labels.iter().map(|l| l.labels.len()).sum();
    info!("label: {total} labels over {} frames", labels.len());
    Ok(vec![write_file(
        &layout.labels(),
        format_label_file(&labels).as_bytes(),
        st,
    )?])
}

fn load_named(
    st: Stage,
    ds: &Dataset,
    layout: &Layout,
    name: &str,
) -> StageResult<Vec<DetectionSet>> {
    let path = detection_source(layout, name);
    require(st, &path, &format!("detections for `{name}`"))?;
    if name == LABELS_NAME {
        Ok(load_label_file(&path)
            .scoped(st)?
            .iter()
            .map(|l| l.as_detection_set(LABELS_NAME))
            .collect())
    } else {
        load_sets(st, ds, &path)
    }
}

fn histogram_csv(pairs: &[FramePair], hists: &[DistanceHistogram]) -> String {
    let nb = hists.first().map_or(0, |h| h.bins.len());
    let mut s = String::from("query,candidate,overlap,visible_queries");
    for b in 0..nb {
        let _ = write!(s, ",d{b}");
    }
    let _ = writeln!(s, ",d{nb}+");
    for (p, h) in pairs.iter().zip(hists) {
        let _ = write!(
            s,
            "{},{},{},{}",
            p.query, p.candidate, p.overlap, h.visible_queries
        );
        for b in &h.bins {
            let _ = write!(s, ",{b}");
        }
        let _ = writeln!(s, ",{}", h.unmatched);
    }
    s
}

/// Frames kept after striding, with depth loaded.
pub fn strided_depths(ds: &Dataset, params: &EvalParams) -> crate::Result<Vec<(usize, DepthMap)>> {
    ds.poses
        .iter()
        .step_by(params.frame_stride.max(1))
        .map(|(i, _)| Ok((*i, ds.load_depth(*i)?)))
        .collect()
}

fn run_eval(cfg: &RunConfig, layout: &Layout) -> StageResult<Vec<PathBuf>> {
    let st = Stage::Eval;
    let ds = open_dataset(st, layout)?;
    let params = &cfg.eval.params;
    let depths = strided_depths(&ds, params).scoped(st)?;
    if depths.len() < 2 {
        return fail(
            st,
            ExitKind::Data,
            format!("need ≥ 2 frames after stride (have {})", depths.len()),
        );
    }
    let views: Vec<FrameView<'_>> = depths
        .iter()
        .map(|(i, d)| FrameView {
            index: *i,
            pose: ds.pose(*i).expect("strided from poses"),
            depth: d,
        })
        .collect();
    let once = EvalParams {
        frame_stride: 1,
        ..params.clone()
    };
    let pairs = select_pairs(&views, &ds.intrinsics, &once);
    if pairs.is_empty() {
        return fail(
            st,
            ExitKind::Data,
            format!(
                "no frame pairs reach the minimum overlap {}",
                params.min_overlap
            ),
        );
    }
    info!("eval: {} pairs from {} frames", pairs.len(), views.len());
    let by_index: BTreeMap<usize, FrameView<'_>> = views.iter().map(|v| (v.index, *v)).collect();
    let mut out = Vec::new();
    let mut pair_text = String::from("query,candidate,overlap\n");
    for p in &pairs {
        let _ = writeln!(pair_text, "{},{},{}", p.query, p.candidate, p.overlap);
    }
    out.push(write_file(
        &layout.eval_dir().join("pairs.csv"),
        pair_text.as_bytes(),
        st,
    )?);
    let names = eval_names(cfg, layout);
    if names.is_empty() {
        return fail(
            st,
            ExitKind::Data,
            "nothing to evaluate: no detection files or labels",
        );
    }
    for name in &names {
        let sets = load_named(st, &ds, layout, name)?;
        let capped = capped_by_frame(&sets, params);
        let empty: Vec<Detection> = Vec::new();
        let hists = evaluate_pairs(
            &pairs,
            |i| by_index.get(&i).copied(),
            |i| capped.get(&i).map_or(empty.as_slice(), Vec::as_slice),
            &ds.intrinsics,
            params,
        )
        .scoped(st)?;
        if let Some(k) = hists.iter().position(|h| !h.is_conserved()) {
            return fail(
                st,
                ExitKind::Internal,
                format!("{name}: histogram of pair {k} does not sum to its visible queries"),
            );
        }
        out.push(write_file(
            &layout.eval_dir().join(format!("{name}.pairs.csv")),
            histogram_csv(&pairs, &hists).as_bytes(),
            st,
        )?);
        let report = aggregate(&hists).scoped(st)?;
        let csv = layout.eval_dir().join(format!("{name}.csv"));
        let json = export_report(&report, name, params, &csv).scoped(st)?;
        info!(
            "eval: {name}: {:.2} repeatable within 3 px per pair",
            report.repeatable_within_3px
        );
        out.push(csv);
        out.push(json);
    }
    Ok(out)
}

fn table(
    title: &str,
    rows: &[(String, Vec<f64>)],
    labels: &[String],
    extra: Option<(&str, Vec<f64>)>,
) -> String {
    let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(8);
    let mut s = format!("{title}\n{:<name_w$}", "detector");
    for l in labels {
        let _ = write!(s, " {l:>8}");
    }
    if let Some((h, _)) = &extra {
        let _ = write!(s, " {h:>8}");
    }
    s.push('\n');
    for (k, (name, vals)) in rows.iter().enumerate() {
        let _ = write!(s, "{name:<name_w$}");
        for v in vals {
            let _ = write!(s, " {v:>8.2}");
        }
        if let Some((_, e)) = &extra {
            let _ = write!(s, " {:>8.2}", e[k]);
        }
        s.push('\n');
    }
    s
}

fn run_report(cfg: &RunConfig, layout: &Layout) -> StageResult<Vec<PathBuf>> {
    let st = Stage::Report;
    let names = eval_names(cfg, layout);
    if names.is_empty() {
        return fail(st, ExitKind::Data, "nothing to report");
    }
    let mut summaries = Vec::new();
    for n in &names {
        let path = layout.eval_dir().join(format!("{n}.json"));
        let bytes = fs::read(&path)
            .map_err(|e| Error::io(&path, e))
            .scoped(st)?;
        let s: ReportSummary = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(&path, e.to_string()))
            .scoped(st)?;
        summaries.push(s);
    }
    let nb = summaries[0].report.max_distance();
    if summaries.iter().any(|s| s.report.max_distance() != nb) {
        return fail(st, ExitKind::Data, "reports use different bin counts");
    }
    let labels: Vec<String> = (0..=nb)
        .map(|b| {
            if b == nb {
                format!("{nb}+")
            } else {
                b.to_string()
            }
        })
        .collect();
    let counts: Vec<(String, Vec<f64>)> = summaries
        .iter()
        .map(|s| (s.detector.clone(), s.report.mean_count.clone()))
        .collect();
    let pcts: Vec<(String, Vec<f64>)> = summaries
        .iter()
        .map(|s| (s.detector.clone(), s.report.mean_percent.clone()))
        .collect();
    let within: Vec<f64> = summaries
        .iter()
        .map(|s| s.report.repeatable_within_3px)
        .collect();
    let mut text = table(
        "mean detections per pair by distance (px)",
        &counts,
        &labels,
        Some(("<=3px", within)),
    );
    text.push('\n');
    text.push_str(&table(
        "mean percent of visible detections by distance (px)",
        &pcts,
        &labels,
        None,
    ));
    text.push('\n');
    for s in &summaries {
        let _ = writeln!(
            text,
            "{}: {} pairs, {} with visible detections",
            s.detector, s.pairs, s.pairs_with_queries
        );
    }
    text.push_str("\n# resolved configuration\n");
    for line in cfg.to_toml().lines() {
        let _ = writeln!(text, "# {line}");
    }
    let mut out = vec![write_file(
        &layout.report_dir().join("report.txt"),
        text.as_bytes(),
        st,
    )?];
    for s in &summaries {
        let mut dat = String::from("# bin mean_count mean_percent\n");
        for b in 0..=nb {
            let _ = writeln!(
                dat,
                "{b} {} {}",
                s.report.mean_count[b], s.report.mean_percent[b]
            );
        }
        out.push(write_file(
            &layout.report_dir().join(format!("{}.dat", s.detector)),
            dat.as_bytes(),
            st,
        )?);
    }
    print!("{text}");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("evaluate".parse::<Stage>().is_err());
    }

    #[test]
    fn sha_of_empty() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn table_is_aligned() {
        let rows = vec![
            ("harris".to_string(), vec![1.0, 22.5]),
            ("a-much-longer-name".to_string(), vec![3.25, 0.0]),
        ];
        let t = table("t", &rows, &["0".into(), "1+".into()], None);
        let widths: Vec<usize> = t.lines().skip(1).map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{t}");
    }
}
