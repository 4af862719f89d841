//! Python bindings: scenes, metrics, the synthetic generator, the SGNN model
//! and the gradient check. Configurations and specs cross the boundary as JSON
//! strings; matrices as lists of rows.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use lanetopo::assignment::{hungarian as solve, CostMatrix};
use lanetopo::geometry;
use lanetopo::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use lanetopo::metrics;
use lanetopo::model::{Model as CoreModel, ModelConfig};
use lanetopo::nn::Params;
use lanetopo::scene::{validate_frame, BoxCorners, Centerline, EvalConfig, FrameGraph, Point3};
use lanetopo::scene_io::{self, Checkpoint, ParseOptions};
use lanetopo::sgnn::{LayerState, Variant};
use lanetopo::synth::{self, SynthSpec};
use lanetopo::{DenseMatrix, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::File { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    let bytes = scene_io::to_json_bytes(value).map_err(to_py)?;
    String::from_utf8(bytes).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<DenseMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    DenseMatrix::from_rows(&rows, cols).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn polyline(points: Vec<(f64, f64, f64)>) -> Centerline {
    Centerline::new(points.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect())
}

fn variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

/// One frame: lanes, traffic elements and both adjacency matrices.
#[pyclass(module = "lanetopo_py", from_py_object)]
#[derive(Clone)]
struct Scene {
    frame: FrameGraph,
}

#[pymethods]
impl Scene {
    #[staticmethod]
    #[pyo3(signature = (text, resample = false))]
    fn from_json(text: &str, resample: bool) -> PyResult<Self> {
        let parsed = scene_io::parse_scene(text.as_bytes(), ParseOptions { resample }).map_err(to_py)?;
        Ok(Self { frame: parsed.frame })
    }

    fn to_json(&self) -> PyResult<String> {
        let bytes = scene_io::serialize_scene(&self.frame).map_err(to_py)?;
        String::from_utf8(bytes).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn frame_id(&self) -> String {
        self.frame.frame_id.clone()
    }

    #[getter]
    fn lanes(&self) -> Vec<Vec<(f64, f64, f64)>> {
        self.frame.lanes.iter().map(|l| l.points.iter().map(|p| (p.x, p.y, p.z)).collect()).collect()
    }

    #[getter]
    fn lane_confidences(&self) -> Vec<f64> {
        self.frame.lanes.iter().map(|l| l.confidence).collect()
    }

    #[getter]
    fn attributes(&self) -> Vec<usize> {
        self.frame.tes.iter().map(|t| t.attribute.index()).collect()
    }

    #[getter]
    fn boxes(&self) -> Vec<(f64, f64, f64, f64)> {
        self.frame.tes.iter().map(|t| (t.bbox.x1, t.bbox.y1, t.bbox.x2, t.bbox.y2)).collect()
    }

    #[getter]
    fn adj_ll(&self) -> Vec<Vec<f64>> {
        self.frame.adj_ll.to_rows()
    }

    #[getter]
    fn adj_lt(&self) -> Vec<Vec<f64>> {
        self.frame.adj_lt.to_rows()
    }

    /// Ground-truth validation findings as readable strings.
    fn validate(&self) -> Vec<String> {
        validate_frame(&self.frame, &EvalConfig::default()).iter().map(ToString::to_string).collect()
    }

    fn __len__(&self) -> usize {
        self.frame.lanes.len()
    }

    fn __repr__(&self) -> String {
        format!("Scene(frame_id={:?}, lanes={}, traffic_elements={})", self.frame.frame_id, self.frame.lanes.len(), self.frame.tes.len())
    }
}

/// SGNN stack plus prediction heads.
#[pyclass(module = "lanetopo_py")]
struct Model {
    inner: CoreModel,
    config: ModelConfig,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let config: ModelConfig = from_json::<ModelConfig>(config)?.aligned();
        let inner = CoreModel::init(&config, seed).map_err(to_py)?;
        Ok(Self { inner, config })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path.as_ref()).map_err(to_py)?;
        let config = ck.config.clone();
        Ok(Self { inner: ck.into_model().map_err(to_py)?, config })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        scene_io::write_json(path.as_ref(), &Checkpoint::from_model(&self.inner, &self.config)).map_err(to_py)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.layers.len()
    }

    #[getter]
    fn variant(&self) -> String {
        format!("{:?}", self.inner.variant).to_lowercase()
    }

    #[setter]
    fn set_variant(&mut self, name: &str) -> PyResult<()> {
        self.inner.variant = variant(name)?;
        self.config.sgnn.variant = self.inner.variant;
        Ok(())
    }

    /// Runs every layer with head feedback. Returns, per layer, a tuple
    /// `(lane_queries, te_queries, adj_ll, adj_lt)`.
    #[allow(clippy::type_complexity)]
    fn run(&self, lane_queries: Vec<Vec<f64>>, te_queries: Vec<Vec<f64>>) -> PyResult<Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
        let q_l = matrix(lane_queries, "lane_queries")?;
        let q_t = matrix(te_queries, "te_queries")?;
        let state = LayerState::initial(q_l.rows(), q_t.rows());
        let out = self.inner.run_from(&q_l, &q_t, state, true).map_err(to_py)?;
        Ok(out
            .into_iter()
            .map(|(o, p)| (o.q_l_tilde.to_rows(), o.q_t_tilde.to_rows(), p.conf_ll.to_rows(), p.conf_lt.to_rows()))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={}, layers={}, params={})", self.variant(), self.num_layers(), self.num_params())
    }
}

#[pyfunction]
fn frechet_distance(a: Vec<(f64, f64, f64)>, b: Vec<(f64, f64, f64)>) -> PyResult<f64> {
    geometry::frechet_distance(&polyline(a), &polyline(b)).map_err(to_py)
}

#[pyfunction]
fn chamfer_distance(a: Vec<(f64, f64, f64)>, b: Vec<(f64, f64, f64)>) -> PyResult<f64> {
    geometry::chamfer_distance(&polyline(a), &polyline(b)).map_err(to_py)
}

#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    geometry::iou_2d(&BoxCorners::new(a.0, a.1, a.2, a.3), &BoxCorners::new(b.0, b.1, b.2, b.3))
}

/// Minimum-cost assignment; returns `(row, col)` pairs.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    let m = CostMatrix::new(matrix(cost, "cost")?).map_err(to_py)?;
    Ok(solve(&m).pairs)
}

#[pyfunction]
fn ols(det_l: f64, det_t: f64, top_ll: f64, top_lt: f64) -> PyResult<f64> {
    metrics::ols(det_l, det_t, top_ll, top_lt).map_err(to_py)
}

/// Evaluates aligned frames and returns the JSON report.
#[pyfunction]
#[pyo3(signature = (gt, pred, config = None, per_frame = false))]
fn evaluate(gt: Vec<Scene>, pred: Vec<Scene>, config: Option<&str>, per_frame: bool) -> PyResult<String> {
    let config: EvalConfig = from_json(config)?;
    let g: Vec<FrameGraph> = gt.into_iter().map(|s| s.frame).collect();
    let p: Vec<FrameGraph> = pred.into_iter().map(|s| s.frame).collect();
    let report = if per_frame {
        metrics::evaluate_with_frames(&g, &p, &config)
    } else {
        metrics::evaluate(&g, &p, &config)
    }
    .map_err(to_py)?;
    to_json(&report)
}

#[pyfunction]
#[pyo3(signature = (frame_index, spec = None))]
fn generate(frame_index: u64, spec: Option<&str>) -> PyResult<Scene> {
    let spec: SynthSpec = from_json(spec)?;
    Ok(Scene { frame: synth::generate(&spec, frame_index).map_err(to_py)? })
}

#[pyfunction]
#[pyo3(signature = (scene, frame_index, spec = None))]
fn perturb(scene: &Scene, frame_index: u64, spec: Option<&str>) -> PyResult<Scene> {
    let spec: SynthSpec = from_json(spec)?;
    spec.validate().map_err(to_py)?;
    Ok(Scene { frame: synth::perturb(&scene.frame, &spec, frame_index) })
}

/// Finite-difference check of one seed; returns the JSON report.
#[pyfunction]
#[pyo3(signature = (seed, variant_name = "skg", eps = 1e-5))]
fn gradcheck(seed: u64, variant_name: &str, eps: f64) -> PyResult<String> {
    let cfg = GradcheckConfig { eps, ..GradcheckConfig::default() };
    to_json(&run_gradcheck(seed, variant(variant_name)?, &cfg).map_err(to_py)?)
}

#[pymodule]
fn lanetopo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_distance, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(ols, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
