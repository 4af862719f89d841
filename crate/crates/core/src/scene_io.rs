//! File formats: scene JSON, run configuration, parameter checkpoints and
//! report output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::resample_standard;
use crate::heads::HeadConfig;
use crate::loss::LossConfig;
use crate::matrix::DenseMatrix;
use crate::model::{check_model, Model, ModelConfig};
use crate::nn::Params;
use crate::scene::{
    validate_prediction, Attribute, BoxCorners, Centerline, EvalConfig, FrameGraph, ImageSize, Point3, TrafficElement,
    Violation, NUM_ATTRIBUTES,
};
use crate::sgnn::SgnnConfig;
use crate::synth::SynthSpec;

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "LANETOPO_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficElementRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub attribute: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

/// Optional query matrices carried alongside a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub lanes: Vec<Vec<f64>>,
    pub traffic_elements: Vec<Vec<f64>>,
}

/// On-disk scene layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub frame_id: String,
    pub lanes: Vec<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_confidences: Option<Vec<f64>>,
    pub traffic_elements: Vec<TrafficElementRecord>,
    pub adj_ll: Vec<Vec<f64>>,
    pub adj_lt: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<QueryRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Resample every lane to the standard point count on load.
    pub resample: bool,
}

#[derive(Debug, Clone)]
pub struct ParsedScene {
    pub frame: FrameGraph,
    /// `(lane queries, TE queries)` when the file carries them.
    pub queries: Option<(DenseMatrix, DenseMatrix)>,
    /// Structural findings; ground-truth specific checks are left to the caller.
    pub violations: Vec<Violation>,
}

fn line_col_to_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if current == line {
            break;
        }
        if b == b'\n' {
            current += 1;
            start = i + 1;
        }
    }
    (start + column.saturating_sub(1)).min(bytes.len())
}

fn offset_to_line_col(bytes: &[u8], offset: usize) -> (usize, usize) {
    let before = &bytes[..offset.min(bytes.len())];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let col = before.iter().rev().take_while(|&&b| b != b'\n').count() + 1;
    (line, col)
}

/// Parse error for a semantic problem found after decoding: located at the
/// first occurrence of the offending top-level key.
fn semantic_error(bytes: &[u8], path: String, key: &str, message: String) -> Error {
    let needle = format!("\"{key}\"");
    let offset = bytes
        .windows(needle.len())
        .position(|w| w == needle.as_bytes())
        .unwrap_or(0);
    let (line, column) = offset_to_line_col(bytes, offset);
    Error::Parse { path, line, column, offset, message }
}

fn check_rect(bytes: &[u8], key: &str, rows: &[Vec<f64>], n_rows: usize, n_cols: usize) -> Result<DenseMatrix> {
    if rows.len() != n_rows {
        return Err(semantic_error(bytes, key.into(), key, format!("expected {n_rows} rows, got {}", rows.len())));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n_cols {
            return Err(semantic_error(bytes, format!("{key}[{i}]"), key, format!("expected {n_cols} columns, got {}", r.len())));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(semantic_error(bytes, format!("{key}[{i}][{j}]"), key, "non-finite value".into()));
        }
    }
    DenseMatrix::from_rows(rows, n_cols)
}

pub fn parse_scene(bytes: &[u8], options: ParseOptions) -> Result<ParsedScene> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let file: SceneFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let (line, column) = (inner.line(), inner.column());
        Error::Parse { path, line, column, offset: line_col_to_offset(bytes, line, column), message: inner.to_string() }
    })?;
    from_scene_file(file, bytes, options)
}

fn from_scene_file(file: SceneFile, bytes: &[u8], options: ParseOptions) -> Result<ParsedScene> {
    let n_l = file.lanes.len();
    let n_t = file.traffic_elements.len();
    if let Some(c) = &file.lane_confidences {
        if c.len() != n_l {
            return Err(semantic_error(bytes, "lane_confidences".into(), "lane_confidences", format!("expected {n_l} entries, got {}", c.len())));
        }
    }
    let mut lanes = Vec::with_capacity(n_l);
    for (i, pts) in file.lanes.iter().enumerate() {
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(semantic_error(bytes, format!("lanes[{i}]"), "lanes", "non-finite coordinate".into()));
        }
        let conf = file.lane_confidences.as_ref().map_or(1.0, |c| c[i]);
        let line = Centerline::with_confidence(pts.iter().map(|&p| Point3::from(p)).collect(), conf);
        lanes.push(if options.resample {
            resample_standard(&line).map_err(|e| semantic_error(bytes, format!("lanes[{i}]"), "lanes", e.to_string()))?
        } else {
            line
        });
    }
    let mut tes = Vec::with_capacity(n_t);
    for (i, t) in file.traffic_elements.iter().enumerate() {
        let at = |field: &str| format!("traffic_elements[{i}].{field}");
        let attribute = Attribute::from_index(t.attribute).ok_or_else(|| {
            semantic_error(bytes, at("attribute"), "traffic_elements", format!("attribute {} outside 0..{NUM_ATTRIBUTES}", t.attribute))
        })?;
        let [x1, y1, x2, y2] = t.bbox;
        let bbox = BoxCorners::new(x1, y1, x2, y2);
        let class_scores = match &t.scores {
            None => attribute.one_hot(),
            Some(s) => {
                if s.len() != NUM_ATTRIBUTES {
                    return Err(semantic_error(bytes, at("scores"), "traffic_elements", format!("expected {NUM_ATTRIBUTES} scores, got {}", s.len())));
                }
                let mut a = [0.0; NUM_ATTRIBUTES];
                a.copy_from_slice(s);
                a
            }
        };
        tes.push(TrafficElement { bbox, attribute, class_scores });
    }
    let adj_ll = check_rect(bytes, "adj_ll", &file.adj_ll, n_l, n_l)?;
    let adj_lt = check_rect(bytes, "adj_lt", &file.adj_lt, n_l, n_t)?;
    let image_size = match file.image_size {
        None => ImageSize::default(),
        Some([w, h]) if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() => ImageSize { width: w, height: h },
        Some(_) => return Err(semantic_error(bytes, "image_size".into(), "image_size", "width and height must be positive".into())),
    };
    let queries = match &file.queries {
        None => None,
        Some(q) => {
            let width = |rows: &Vec<Vec<f64>>| rows.first().map_or(0, Vec::len);
            let ql = check_rect(bytes, "queries", &q.lanes, n_l, width(&q.lanes))
                .map_err(|e| relabel(e, "queries.lanes"))?;
            let qt = check_rect(bytes, "queries", &q.traffic_elements, n_t, width(&q.traffic_elements))
                .map_err(|e| relabel(e, "queries.traffic_elements"))?;
            Some((ql, qt))
        }
    };
    let frame = FrameGraph { frame_id: file.frame_id, lanes, tes, adj_ll, adj_lt, image_size };
    let violations = validate_prediction(&frame);
    Ok(ParsedScene { frame, queries, violations })
}

fn relabel(e: Error, prefix: &str) -> Error {
    match e {
        Error::Parse { path, line, column, offset, message } => {
            Error::Parse { path: path.replacen("queries", prefix, 1), line, column, offset, message }
        }
        other => other,
    }
}

pub fn to_scene_file(frame: &FrameGraph) -> SceneFile {
    let lane_confidences = frame
        .lanes
        .iter()
        .any(|l| l.confidence != 1.0)
        .then(|| frame.lanes.iter().map(|l| l.confidence).collect());
    SceneFile {
        frame_id: frame.frame_id.clone(),
        lanes: frame.lanes.iter().map(|l| l.points.iter().map(|p| p.to_array()).collect()).collect(),
        lane_confidences,
        traffic_elements: frame
            .tes
            .iter()
            .map(|t| TrafficElementRecord {
                bbox: t.bbox.to_array(),
                attribute: t.attribute.index(),
                scores: (t.class_scores != t.attribute.one_hot()).then(|| t.class_scores.to_vec()),
            })
            .collect(),
        adj_ll: frame.adj_ll.to_rows(),
        adj_lt: frame.adj_lt.to_rows(),
        image_size: Some([frame.image_size.width, frame.image_size.height]),
        queries: None,
    }
}

/// Pretty JSON with shortest round-trip float formatting and a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

pub fn serialize_scene(frame: &FrameGraph) -> Result<Vec<u8>> {
    to_json_bytes(&to_scene_file(frame))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, to_json_bytes(value)?).map_err(|e| Error::file(path, e))
}

pub fn read_scene(path: &Path, options: ParseOptions) -> Result<ParsedScene> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_scene(&bytes, options).map_err(|e| match e {
        Error::Parse { path: p, line, column, offset, message } => {
            Error::Parse { path: format!("{}:{p}", path.display()), line, column, offset, message }
        }
        other => other,
    })
}

/// Every `*.json` scene in `dir`, ordered by frame id.
pub fn read_scene_dir(dir: &Path, options: ParseOptions) -> Result<Vec<(PathBuf, ParsedScene)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::file(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut scenes = paths
        .into_iter()
        .map(|p| read_scene(&p, options).map(|s| (p, s)))
        .collect::<Result<Vec<_>>>()?;
    scenes.sort_by(|a, b| a.1.frame.frame_id.cmp(&b.1.frame.frame_id));
    Ok(scenes)
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub eval: EvalConfig,
    pub sgnn: SgnnConfig,
    pub heads: HeadConfig,
    pub loss: LossConfig,
    pub synth: SynthSpec,
    pub seed: u64,
    /// Worker threads; `None` lets the pool decide.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            eval: EvalConfig::default(),
            sgnn: SgnnConfig::default(),
            heads: HeadConfig::default(),
            loss: LossConfig::default(),
            synth: SynthSpec::default(),
            seed: 0,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.eval.validate()?;
        self.sgnn.validate()?;
        self.loss.weights.validate()?;
        self.synth.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn from_str(text: &str) -> Result<Self> {
        let config: RunConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Thread count after the environment override.
    pub fn effective_threads(&self) -> Result<Option<usize>> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
            },
            Err(_) => Ok(self.threads),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { sgnn: self.sgnn.clone(), heads: self.heads.clone() }.aligned()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_FORMAT: &str = "lanetopo-params";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Flat manifest of named tensors plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut |name, (r, c), d| tensors.push(TensorRecord { name, shape: [r, c], data: d.to_vec() }));
        Self { format: CHECKPOINT_FORMAT.into(), version: 1, config: config.clone().aligned(), tensors }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != 1 {
            return Err(Error::Config(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let mut model = Model::init(&self.config, 0)?;
        let mut by_name: std::collections::BTreeMap<String, TensorRecord> =
            self.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut problem = None;
        model.visit_mut("", &mut |name, (r, c), d| {
            match by_name.remove(&name) {
                Some(t) if t.shape == [r, c] && t.data.len() == d.len() && t.data.iter().all(|v| v.is_finite()) => {
                    d.copy_from_slice(&t.data)
                }
                Some(t) => {
                    problem.get_or_insert(format!("tensor {name}: expected shape [{r}, {c}], got {:?} with {} values", t.shape, t.data.len()));
                }
                None => {
                    problem.get_or_insert(format!("missing tensor {name}"));
                }
            }
        });
        if let Some(p) = problem {
            return Err(Error::Config(p));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Config(format!("unknown tensor {extra}")));
        }
        check_model(&model)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
