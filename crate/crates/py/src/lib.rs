//! Python module `idsplat`: synthetic benchmarks, training, rendering,
//! queries and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use idsplat::cluster::hdbscan::{hdbscan as run_hdbscan, HdbscanParams};
use idsplat::cluster::ClusterResult;
use idsplat::distill::Teacher;
use idsplat::eval::{self, Aabb};
use idsplat::io::{load_scene, save_scene};
use idsplat::pipeline;
use idsplat::raster::{render, Channels};
use idsplat::scene::UNASSIGNED;
use idsplat::synth::{self, PerturbConfig, SynthSpec};
use idsplat::train::{self as core_train, Checkpoint, MetricsLog, TrainConfig};
use idsplat::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::MalformedHeader(_) | Error::VersionMismatch { .. } | Error::TruncatedPayload { .. } => {
            PyIOError::new_err(e.to_string())
        }
        Error::UnknownQuery { .. } => PyKeyError::new_err(e.to_string()),
        Error::OutOfBounds { .. } => PyIndexError::new_err(e.to_string()),
        Error::Divergence(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Applies keyword overrides, given as strings or numbers, to the training
/// config and synthetic spec.
fn configure(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<(TrainConfig, SynthSpec)> {
    let mut cfg = TrainConfig::default();
    let mut spec = SynthSpec::default();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            let value = match value.as_str() {
                "True" => "true".to_string(),
                "False" => "false".to_string(),
                _ => value,
            };
            let a = cfg.set(&key, &value).map_err(py_err)?;
            let b = spec.set(&key, &value).map_err(py_err)?;
            if !a && !b {
                return Err(PyKeyError::new_err(format!("unknown key '{key}'")));
            }
        }
    }
    Ok((cfg, spec))
}

fn box_tuple(b: &Aabb) -> ([f64; 3], [f64; 3]) {
    (b.min, b.max)
}

fn ids_to_py(ids: &[u32]) -> Vec<i64> {
    ids.iter().map(|&g| if g == UNASSIGNED { -1 } else { g as i64 }).collect()
}

/// A Gaussian scene with its semantic field, cameras and training images.
#[pyclass(name = "Scene", module = "idsplat", skip_from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: idsplat::scene::Scene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_scene(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_scene(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.idsf.dim()
    }

    #[getter]
    fn n_views(&self) -> usize {
        self.inner.cameras.len()
    }

    #[getter]
    fn n_groups(&self) -> usize {
        self.inner.idsf.n_groups()
    }

    /// Instance label per Gaussian, -1 for unassigned.
    fn labels(&self) -> Vec<i64> {
        ids_to_py(self.inner.idsf.labels())
    }

    fn positions(&self) -> Vec<[f32; 3]> {
        self.inner.gaussians.iter().map(|g| g.position).collect()
    }

    /// Renders a training view. Returns a dict with `width`, `height` and
    /// flat lists for the requested channels (`color`, `depth`, `feature`,
    /// `id`).
    #[pyo3(signature = (view, channels = "color,id"))]
    fn render<'py>(&self, py: Python<'py>, view: usize, channels: &str) -> PyResult<Bound<'py, PyDict>> {
        let cam = self
            .inner
            .cameras
            .get(view)
            .ok_or_else(|| PyIndexError::new_err(format!("view {view} of {}", self.inner.cameras.len())))?;
        let mut ch = Channels {
            color: false,
            feature: false,
            id: false,
            depth: false,
        };
        for c in channels.split(',').map(str::trim) {
            match c {
                "color" => ch.color = true,
                "feature" => ch.feature = true,
                "id" => ch.id = true,
                "depth" => ch.depth = true,
                other => return Err(PyValueError::new_err(format!("unknown channel '{other}'"))),
            }
        }
        let (out, _) = render(&self.inner, cam, ch);
        let d = PyDict::new(py);
        d.set_item("width", out.width)?;
        d.set_item("height", out.height)?;
        if let Some(c) = out.color {
            d.set_item("color", c)?;
        }
        if let Some(f) = out.feature {
            d.set_item("feature", f)?;
            d.set_item("feature_dim", out.feature_dim)?;
        }
        if let Some(ids) = out.id_map {
            d.set_item("id", ids_to_py(&ids))?;
        }
        if let Some(z) = out.depth {
            d.set_item("depth", z)?;
        }
        Ok(d)
    }

    /// Clusters the scene in the joint position/color/semantic space and
    /// writes the labels. Returns the number of groups.
    #[pyo3(signature = (min_cluster_size = None, min_samples = 10))]
    fn cluster(&mut self, min_cluster_size: Option<usize>, min_samples: usize) -> usize {
        let cfg = idsplat::cluster::ClusterConfig {
            min_cluster_size,
            min_samples,
        };
        idsplat::cluster::cluster_scene(&mut self.inner, &cfg).n_groups
    }
}

/// A synthetic benchmark: ground truth plus the perturbed training start.
#[pyclass(name = "Benchmark", module = "idsplat")]
struct PyBenchmark {
    inner: synth::Benchmark,
}

#[pymethods]
impl PyBenchmark {
    /// Generates a benchmark; keyword arguments override spec fields.
    #[staticmethod]
    #[pyo3(signature = (**kwargs))]
    fn generate(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let (_, spec) = configure(kwargs)?;
        let (truth_scene, truth) = synth::generate(&spec).map_err(py_err)?;
        let start = synth::perturb_for_training(&truth_scene, &truth, &PerturbConfig::default());
        Ok(Self {
            inner: synth::Benchmark {
                spec,
                start,
                truth_scene,
                truth,
            },
        })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: synth::read_benchmark(dir).map_err(py_err)?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        let b = &self.inner;
        synth::write_benchmark(dir, &b.spec, &b.truth_scene, &b.truth, &b.start).map_err(py_err)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.truth.class_names.clone()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.spec.image_size
    }

    /// Ground-truth boxes as `(min, max)` pairs.
    fn boxes(&self) -> Vec<([f64; 3], [f64; 3])> {
        self.inner.truth.boxes.iter().map(box_tuple).collect()
    }

    fn start_scene(&self) -> PyScene {
        PyScene {
            inner: self.inner.start.clone(),
        }
    }

    fn truth_scene(&self) -> PyScene {
        PyScene {
            inner: self.inner.truth_scene.clone(),
        }
    }

    /// Trains both phases from the start scene; keyword arguments override
    /// training config fields.
    #[pyo3(signature = (**kwargs))]
    fn train(&self, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<PyModel> {
        let (cfg, _) = configure(kwargs)?;
        let mut scene = self.inner.start.clone();
        core_train::phase1_reconstruct(&mut scene, &cfg, &mut MetricsLog::none()).map_err(py_err)?;
        let teacher = self.inner.truth.teacher(&self.inner.spec).map_err(py_err)?;
        let r = core_train::phase2_bootstrap(&mut scene, &teacher, &cfg, &mut MetricsLog::none()).map_err(py_err)?;
        Ok(PyModel::new(Checkpoint {
            scene,
            head: r.head,
            down: r.down,
            optimizer: Some(r.optimizer),
        }))
    }

    /// Full metric report of a trained model on this benchmark.
    fn evaluate<'py>(&self, py: Python<'py>, model: &PyModel) -> PyResult<Bound<'py, PyDict>> {
        let b = &self.inner;
        let teacher = b.truth.teacher(&b.spec).map_err(py_err)?;
        let psnr = pipeline::reconstruction_psnr(&model.ckpt.scene, &b.truth);
        let (report, _) = pipeline::evaluate(&model.ckpt.scene, &model.cluster, &model.ckpt.head, &teacher, &b.truth, psnr)
            .map_err(py_err)?;
        let d = PyDict::new(py);
        for (k, v) in report.summary() {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    /// Group selected by a class name.
    fn query(&self, model: &PyModel, name: &str) -> PyResult<(Option<u32>, Vec<f64>)> {
        let teacher = self.inner.truth.teacher(&self.inner.spec).map_err(py_err)?;
        let r = eval::query_text(
            &model.ckpt.scene,
            &model.cluster,
            &model.ckpt.head,
            teacher.query(name).map_err(py_err)?,
        )
        .map_err(py_err)?;
        Ok((r.group_id, r.scores))
    }

    /// Group under pixel `(u, v)` of held-out view `view`.
    fn click(&self, model: &PyModel, view: usize, u: i64, v: i64) -> PyResult<Option<u32>> {
        let cam = self
            .inner
            .truth
            .test_cameras
            .get(view)
            .ok_or_else(|| PyIndexError::new_err(format!("test view {view}")))?;
        Ok(eval::click_select(&model.ckpt.scene, cam, u, v).map_err(py_err)?.group_id)
    }
}

/// Trained scene with its projection head.
#[pyclass(name = "Model", module = "idsplat")]
struct PyModel {
    ckpt: Checkpoint,
    cluster: ClusterResult,
}

impl PyModel {
    fn new(ckpt: Checkpoint) -> Self {
        let cluster = ClusterResult::from_labels(&ckpt.scene, ckpt.scene.idsf.labels().to_vec());
        Self { ckpt, cluster }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self::new(Checkpoint::load(dir).map_err(py_err)?))
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.ckpt.save(dir).map_err(py_err)
    }

    #[getter]
    fn n_groups(&self) -> usize {
        self.cluster.n_groups
    }

    fn scene(&self) -> PyScene {
        PyScene {
            inner: self.ckpt.scene.clone(),
        }
    }

    /// Box of one group as `(min, max)`.
    fn group_box(&self, group: u32) -> PyResult<([f64; 3], [f64; 3])> {
        eval::group_box(&self.cluster, &self.ckpt.scene, group)
            .map(|b| box_tuple(&b))
            .map_err(py_err)
    }
}

/// HDBSCAN labels (-1 for noise) of row-major points.
#[pyfunction]
fn hdbscan(points: Vec<Vec<f64>>, min_cluster_size: usize, min_samples: usize) -> PyResult<Vec<i64>> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) || dim == 0 {
        return Err(PyValueError::new_err("points must be non-empty rows of equal length"));
    }
    let flat: Vec<f64> = points.into_iter().flatten().collect();
    let h = run_hdbscan(&flat, dim, HdbscanParams { min_cluster_size, min_samples });
    Ok(ids_to_py(&h.labels))
}

#[pyfunction]
fn iou3d(a: ([f64; 3], [f64; 3]), b: ([f64; 3], [f64; 3])) -> f64 {
    eval::iou3d(&Aabb { min: a.0, max: a.1 }, &Aabb { min: b.0, max: b.1 })
}

/// Generates, trains and evaluates in one call; returns the metric summary.
#[pyfunction]
#[pyo3(signature = (**kwargs))]
fn run_benchmark<'py>(py: Python<'py>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let (cfg, spec) = configure(kwargs)?;
    let (_, run) = pipeline::run_benchmark(&spec, &PerturbConfig::default(), &cfg, &mut MetricsLog::none())
        .map_err(py_err)?;
    let d = PyDict::new(py);
    for (k, v) in run.report.summary() {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pymodule(name = "idsplat")]
fn idsplat_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyBenchmark>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(hdbscan, m)?)?;
    m.add_function(wrap_pyfunction!(iou3d, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    Ok(())
}
