//! Run configuration: one TOML file, one section per stage.
//!
//! Absent keys take their defaults; unknown keys, type errors and range
//! violations are all reported together with line numbers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::detectors::{DetectorKind, DetectorParams};
use crate::evaluator::EvalParams;
use crate::geometry::CameraIntrinsics;
use crate::labeler::LabelParams;
use crate::synth::{PhotographerConfig, SceneSpec};
use crate::voxelmap::DEFAULT_MAX_RANGE;

/// Name under which labeler output is evaluated next to the detectors.
pub const LABELS_NAME: &str = "labels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneralConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Photographer seed; the scene has its own.
    pub seed: u64,
    /// Worker threads; 0 uses every core. Never changes outputs.
    pub threads: usize,
}

impl Default for GeneralConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            output: PathBuf::from("output"),
            seed: 0,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            fx: 250.0,
            fy: 250.0,
            cx: 159.5,
            cy: 119.5,
            width: 320,
            height: 240,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> crate::Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Cell size of the map the validity rays are cast against.
    pub validity_resolution: f64,
    pub max_range: f64,
    #[serde(flatten)]
    pub photographer: PhotographerConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            validity_resolution: 0.05,
            max_range: DEFAULT_MAX_RANGE,
            photographer: PhotographerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub detectors: Vec<DetectorKind>,
    /// Optional file of `frame_index,x,y,confidence,detector_name` records
    /// imported alongside the native detectors.
    pub external: Option<PathBuf>,
    #[serde(flatten)]
    pub params: DetectorParams,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            detectors: DetectorKind::ALL.to_vec(),
            external: None,
            params: DetectorParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PaintConfig {
    pub resolution: f64,
    /// Detectors whose frame sets are painted, each normalized to 1/N.
    pub detectors: Vec<String>,
    /// Detector that labels pixels seen fewer than `view_threshold` times.
    pub fallback_detector: String,
    pub max_range: f64,
    pub visibility_stride: usize,
}

impl Default for PaintConfig {
    fn default() -> Self {
        Self {
            resolution: 0.01,
            detectors: vec!["harris".into(), "gftt".into(), "fast".into()],
            fallback_detector: "gftt".into(),
            max_range: DEFAULT_MAX_RANGE,
            visibility_stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    #[serde(flatten)]
    pub params: LabelParams,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Detector names to evaluate; empty means every detection file plus
    /// the labels when present.
    pub detectors: Vec<String>,
    #[serde(flatten)]
    pub params: EvalParams,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub general: GeneralConfig,
    pub camera: CameraConfig,
    pub scene: SceneSpec,
    pub synth: SynthConfig,
    pub detect: DetectConfig,
    pub paint: PaintConfig,
    pub label: LabelConfig,
    pub eval: EvalConfig,
}

/// Keys that serialize to nothing at their default value.
const OPTIONAL_KEYS: [(&str, &str); 2] = [("synth", "image_count"), ("detect", "external")];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Every problem found in a config text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// `(section, key) → line` for every `key = value` line, and
/// `(section, "") → line` for headers. Multi-line values are skipped.
fn key_lines(text: &str) -> BTreeMap<(String, String), usize> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    let mut depth = 0i32;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if depth > 0 {
            depth += line.matches('[').count() as i32 - line.matches(']').count() as i32;
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            out.entry((section.clone(), String::new())).or_insert(i + 1);
        } else if let Some((k, v)) = line.split_once('=') {
            out.entry((section.clone(), k.trim().trim_matches('"').to_string()))
                .or_insert(i + 1);
            depth = v.matches('[').count() as i32 - v.matches(']').count() as i32;
        }
    }
    out
}

fn line_of(span: Option<std::ops::Range<usize>>, text: &str) -> Option<usize> {
    span.map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
}

impl RunConfig {
    /// Range checks; each issue names the offending `section.key`.
    pub fn check(&self) -> Vec<(&'static str, &'static str, String)> {
        let mut v = Vec::new();
        let mut push = |s: &'static str, k: &'static str, m: String| v.push((s, k, m));
        if self.general.dataset == self.general.output {
            push(
                "general",
                "output",
                "dataset and output paths must differ".into(),
            );
        }
        if let Err(e) = self.camera.intrinsics() {
            push("camera", "", e.to_string());
        }
        if let Err(e) = self.scene.validate() {
            push("scene", "", e.to_string());
        }
        if let Err(e) = self.synth.photographer.validate() {
            push("synth", "", e.to_string());
        }
        if !(self.synth.validity_resolution > 0.0) {
            push("synth", "validity_resolution", "must be positive".into());
        }
        if !(self.synth.max_range > 0.0) {
            push("synth", "max_range", "must be positive".into());
        }
        let d = &self.detect.params;
        if !(d.harris_threshold >= 0.0) || !(d.gftt_quality >= 0.0) || !(d.dog_threshold >= 0.0) {
            push(
                "detect",
                "",
                "detector thresholds must be nonnegative".into(),
            );
        }
        if !(d.dog_sigma1 > 0.0 && d.dog_sigma1 < d.dog_sigma2) {
            push(
                "detect",
                "dog_sigma1",
                "need 0 < dog_sigma1 < dog_sigma2".into(),
            );
        }
        if !(9..=16).contains(&d.fast_arc) {
            push("detect", "fast_arc", "must lie in 9..=16".into());
        }
        if d.nms_radius == 0 {
            push("detect", "nms_radius", "must be at least 1".into());
        }
        if self.detect.detectors.is_empty() && self.detect.external.is_none() {
            push("detect", "detectors", "no detectors selected".into());
        }
        if !(self.paint.resolution > 0.0) {
            push("paint", "resolution", "must be positive".into());
        }
        if self.paint.detectors.is_empty() {
            push(
                "paint",
                "detectors",
                "at least one painting detector is required".into(),
            );
        }
        if !(self.paint.max_range > 0.0) {
            push("paint", "max_range", "must be positive".into());
        }
        if self.paint.visibility_stride == 0 {
            push("paint", "visibility_stride", "must be at least 1".into());
        }
        if let Err(e) = self.label.params.validate() {
            push("label", "", e.to_string());
        }
        let e = &self.eval.params;
        if e.frame_stride == 0 {
            push("eval", "frame_stride", "must be >= 1".into());
        }
        if let Err(err) = e.validate() {
            if e.frame_stride != 0 {
                push("eval", "", err.to_string());
            }
        }
        v
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses and validates a config text.
pub fn validate_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        ConfigErrors(vec![ConfigIssue {
            line: line_of(e.span(), text),
            message: e.message().to_string(),
        }])
    })?;
    let lines = key_lines(text);
    let known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let mut issues = Vec::new();
    // Unknown entries are reported and dropped so the rest still gets checked.
    table.retain(|section, value| {
        let line = lines.get(&(section.to_string(), String::new())).copied();
        let Some(known_section) = known.get(section).and_then(|v| v.as_table()) else {
            issues.push(ConfigIssue {
                line: line.or_else(|| lines.get(&(String::new(), section.to_string())).copied()),
                message: format!("unknown section `{section}`"),
            });
            return false;
        };
        let Some(keys) = value.as_table_mut() else {
            issues.push(ConfigIssue {
                line,
                message: format!("`{section}` must be a section"),
            });
            return false;
        };
        keys.retain(|key, _| {
            let ok = known_section.contains_key(key) || OPTIONAL_KEYS.contains(&(section, key));
            if !ok {
                issues.push(ConfigIssue {
                    line: lines.get(&(section.to_string(), key.to_string())).copied(),
                    message: format!("unknown key `{key}` in [{section}]"),
                });
            }
            ok
        });
        true
    });
    let parsed: Result<RunConfig, ConfigIssue> = if issues.is_empty() {
        toml::from_str(text).map_err(|e| ConfigIssue {
            line: line_of(e.span(), text),
            message: e.message().to_string(),
        })
    } else {
        // Spans are lost once keys were dropped.
        RunConfig::deserialize(table).map_err(|e| ConfigIssue {
            line: None,
            message: e.message().to_string(),
        })
    };
    match parsed {
        Ok(cfg) => {
            issues.extend(cfg.check().into_iter().map(|(s, k, message)| {
                ConfigIssue {
                    line: lines
                        .get(&(s.to_string(), k.to_string()))
                        .or_else(|| lines.get(&(s.to_string(), String::new())))
                        .copied(),
                    message: if k.is_empty() {
                        format!("[{s}] {message}")
                    } else {
                        format!("{s}.{k}: {message}")
                    },
                }
            }));
            if issues.is_empty() {
                return Ok(cfg);
            }
        }
        Err(issue) => issues.push(issue),
    }
    issues.sort_by_key(|i| i.line.unwrap_or(usize::MAX));
    Err(ConfigErrors(issues))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unknown_keys_do_not_hide_value_errors() {
        let err = validate_config("[general]\nbogus = 1\n[eval]\nframe_stride = 0\n").unwrap_err();
        let lines: Vec<_> = err.0.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![Some(2), Some(4)], "{err}");
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = validate_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.eval.params.frame_stride, 30);
        assert_eq!(cfg.paint.resolution, 0.01);
        assert_eq!(cfg.label.params.view_threshold, 10);
    }

    #[test]
    fn zero_stride_rejected_with_line() {
        let err = validate_config("[general]\nseed = 3\n\n[eval]\nframe_stride = 0\n").unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.0[0].line, Some(5));
        assert!(err.0[0].message.contains("frame_stride"));
    }

    #[test]
    fn unknown_keys_all_reported() {
        let text =
            "[eval]\nframe_strde = 3\n[label]\nview_threshold = 4\nkernal = 3\n[bogus]\nx = 1\n";
        let err = validate_config(text).unwrap_err();
        let msgs: Vec<String> = err.0.iter().map(|e| e.to_string()).collect();
        assert_eq!(msgs.len(), 3, "{msgs:?}");
        assert!(msgs
            .iter()
            .any(|m| m.starts_with("line 2:") && m.contains("frame_strde")));
        assert!(msgs
            .iter()
            .any(|m| m.starts_with("line 5:") && m.contains("kernal")));
        assert!(msgs
            .iter()
            .any(|m| m.starts_with("line 6:") && m.contains("bogus")));
    }

    #[test]
    fn type_errors_have_lines() {
        let err = validate_config("[paint]\n\nresolution = \"fine\"\n").unwrap_err();
        assert_eq!(err.0[0].line, Some(3));
        let err = validate_config("[paint\n").unwrap_err();
        assert_eq!(err.0[0].line, Some(1));
    }

    #[test]
    fn optional_keys_and_flattened_params() {
        let cfg = validate_config(
            "[synth]\nimage_count = 12\npitch_sigma = 0.5\n[detect]\nexternal = \"d.csv\"\nfast_threshold = 30\ndetectors = [\n  \"fast\",\n  \"harris\",\n]\n[eval]\ndetectors = [\"labels\"]\nmax_detections = 50\n",
        )
        .unwrap();
        assert_eq!(cfg.synth.photographer.image_count, Some(12));
        assert_eq!(cfg.synth.photographer.pitch_sigma, 0.5);
        assert_eq!(cfg.detect.external, Some(PathBuf::from("d.csv")));
        assert_eq!(cfg.detect.params.fast_threshold, 30);
        assert_eq!(
            cfg.detect.detectors,
            vec![DetectorKind::Fast, DetectorKind::Harris]
        );
        assert_eq!(cfg.eval.params.max_detections, 50);
    }

    #[test]
    fn same_paths_rejected() {
        let err = validate_config("[general]\ndataset = \"a\"\noutput = \"a\"\n").unwrap_err();
        assert_eq!(err.0[0].line, Some(3));
    }

    #[test]
    fn every_default_key_is_accepted() {
        let text = RunConfig::default().to_toml();
        assert_eq!(validate_config(&text).unwrap(), RunConfig::default());
    }

    proptest! {
        #[test]
        fn round_trip(
            seed in 0u64..1 << 62,
            stride in 1usize..100,
            overlap in 0.0f64..1.0,
            res in 0.001f64..0.5,
            thr in 0.0f64..1.0,
            count in proptest::option::of(0usize..1000),
            dets in proptest::sample::subsequence(DetectorKind::ALL.to_vec(), 1..=4),
        ) {
            let mut cfg = RunConfig::default();
            cfg.general.seed = seed;
            cfg.eval.params.frame_stride = stride;
            cfg.eval.params.min_overlap = overlap;
            cfg.paint.resolution = res;
            cfg.label.params.score_threshold = thr;
            cfg.synth.photographer.image_count = count;
            cfg.detect.detectors = dets;
            let text = cfg.to_toml();
            prop_assert_eq!(validate_config(&text).unwrap(), cfg);
        }
    }
}
