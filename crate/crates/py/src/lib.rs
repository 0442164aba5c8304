//! Python bindings: geometry, phantoms, forward frames, normalization, the AFUA
//! network, training, quantization, the current-mode model and the CLI pipeline.

use std::path::PathBuf;

use bioz_core::afua::{self, IntegrationConfig, NetworkParams};
use bioz_core::analog::{self, HardwareBudget};
use bioz_core::cli::{self, RunConfig};
use bioz_core::datapipe::{self, DatasetSplit, InputSequence};
use bioz_core::fem::{self, ForwardConfig, Frame};
use bioz_core::geometry::{Geometry, GeometryConfig};
use bioz_core::phantom::{self, Label, Phantom, RbfNoiseConfig, TissueModel};
use bioz_core::quantizer::{self, QuantizedParams};
use bioz_core::trainer::{self, TrainConfig};
use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

fn core_err(e: bioz_core::Error) -> PyErr {
    use bioz_core::Error as E;
    match e {
        E::InvalidInput(_) | E::Geometry(_) | E::Shape { .. } => PyValueError::new_err(e.to_string()),
        E::Io { .. } | E::Format { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn cli_err(e: cli::CliError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn label_of(i: usize) -> PyResult<Label> {
    Label::from_index(i).map_err(core_err)
}

fn integration(substeps: usize, dt: f64) -> IntegrationConfig {
    IntegrationConfig { substeps, dt, ..Default::default() }
}

#[pyclass(name = "Geometry", module = "bioz", frozen)]
struct PyGeometry {
    inner: Geometry,
}

#[pymethods]
impl PyGeometry {
    #[new]
    #[pyo3(signature = (edge_length = 0.3))]
    fn new(edge_length: f64) -> PyResult<Self> {
        let inner = Geometry::build(&GeometryConfig::default(), edge_length).map_err(core_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Geometry::load(&path).map_err(core_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(core_err)
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.mesh.n_vertices()
    }

    #[getter]
    fn n_triangles(&self) -> usize {
        self.inner.mesh.n_triangles()
    }

    #[getter]
    fn inner_electrodes(&self) -> Vec<(f64, f64)> {
        self.inner.layout.inner_electrodes.iter().map(|p| (p.x, p.y)).collect()
    }

    #[getter]
    fn inner_probes(&self) -> Vec<usize> {
        self.inner.mesh.inner_probes.clone()
    }

    fn centroids(&self) -> Vec<(f64, f64)> {
        self.inner.mesh.centroids().iter().map(|p| (p.x, p.y)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Geometry(vertices={}, triangles={})", self.n_vertices(), self.n_triangles())
    }
}

#[pyclass(name = "Phantom", module = "bioz", frozen)]
struct PyPhantom {
    inner: Phantom,
}

#[pymethods]
impl PyPhantom {
    #[getter]
    fn id(&self) -> String {
        self.inner.id()
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label.index()
    }

    #[getter]
    fn center(&self) -> (f64, f64) {
        (self.inner.inclusion.center.x, self.inner.inclusion.center.y)
    }

    #[getter]
    fn diameter(&self) -> f64 {
        self.inner.inclusion.diameter
    }

    #[getter]
    fn element_sigma(&self) -> Vec<Complex64> {
        self.inner.element_sigma.clone()
    }

    fn __repr__(&self) -> String {
        format!("Phantom({}, label={}, diameter={:.3})", self.id(), self.label(), self.diameter())
    }
}

#[pyclass(name = "Frame", module = "bioz", frozen)]
struct PyFrame {
    inner: Frame,
}

#[pymethods]
impl PyFrame {
    #[getter]
    fn phantom_id(&self) -> String {
        self.inner.phantom_id.clone()
    }

    /// 28 rows of 25 complex voltages, mV.
    fn voltages(&self) -> Vec<Vec<Complex64>> {
        self.inner.voltages.chunks(25).map(<[_]>::to_vec).collect()
    }

    fn patterns(&self) -> Vec<(usize, usize)> {
        self.inner.pattern_order.iter().map(|p| (p.source, p.sink)).collect()
    }
}

#[pyclass(name = "Sequence", module = "bioz", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySequence {
    inner: InputSequence,
}

#[pymethods]
impl PySequence {
    #[new]
    #[pyo3(signature = (values, n_steps, width, label, id = String::from("seq")))]
    fn new(values: Vec<f32>, n_steps: usize, width: usize, label: usize, id: String) -> PyResult<Self> {
        let inner = InputSequence::new(values, n_steps, width, label_of(label)?, id).map_err(core_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label.index()
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn values(&self) -> Vec<Vec<f32>> {
        (0..self.inner.n_steps()).map(|t| self.inner.step(t).to_vec()).collect()
    }
}

fn unwrap_seqs(seqs: &[PyRef<'_, PySequence>]) -> Vec<InputSequence> {
    seqs.iter().map(|s| s.inner.clone()).collect()
}

#[pyclass(name = "Network", module = "bioz", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    params: NetworkParams,
    integration: IntegrationConfig,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (hidden = 16, inputs = 25, seed = 0, substeps = 10, dt = 0.01))]
    fn new(hidden: usize, inputs: usize, seed: u64, substeps: usize, dt: f64) -> Self {
        Self { params: NetworkParams::init(hidden, inputs, seed), integration: integration(substeps, dt) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, integration) = afua::load_model(&path).map_err(core_err)?;
        Ok(Self { params, integration })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        afua::save_model(&path, &self.params, &self.integration).map_err(core_err)
    }

    #[getter]
    fn n_weights(&self) -> usize {
        self.params.n_weights()
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.params.hidden()
    }

    /// Returns `(label, [p_negative, p_positive])`.
    fn classify(&self, seq: &PySequence) -> PyResult<(usize, [f64; 2])> {
        let (label, p) = afua::classify(&seq.inner, &self.params, &self.integration).map_err(core_err)?;
        Ok((label.index(), p))
    }

    /// Hidden state after every substep.
    #[pyo3(signature = (seq, h0 = afua::DEFAULT_H0))]
    fn trajectory(&self, seq: &PySequence, h0: f64) -> PyResult<Vec<Vec<f64>>> {
        afua::trajectory(&seq.inner, &self.params, &self.integration, h0).map_err(core_err)
    }

    fn evaluate<'py>(&self, py: Python<'py>, seqs: Vec<PyRef<'py, PySequence>>) -> PyResult<Bound<'py, PyAny>> {
        let e = trainer::evaluate(&self.params, &unwrap_seqs(&seqs), &self.integration).map_err(core_err)?;
        to_py(py, &e)
    }

    #[pyo3(signature = (seq, i_unit, h0 = afua::DEFAULT_H0))]
    fn current_mode(&self, seq: &PySequence, i_unit: f64, h0: f64) -> PyResult<Vec<Vec<f64>>> {
        let tr = analog::simulate_current_mode(&seq.inner, &self.params, i_unit, h0, &self.integration)
            .map_err(core_err)?;
        Ok(tr.states.into_iter().map(|s| s.i_h).collect())
    }

    fn quantize(&self, bits: u32) -> PyResult<PyQuantized> {
        let q = quantizer::quantize(&self.params, bits).map_err(core_err)?;
        Ok(PyQuantized { inner: q, integration: self.integration })
    }
}

#[pyclass(name = "QuantizedNetwork", module = "bioz", frozen)]
struct PyQuantized {
    inner: QuantizedParams,
    integration: IntegrationConfig,
}

#[pymethods]
impl PyQuantized {
    #[getter]
    fn bits(&self) -> u32 {
        self.inner.bits
    }

    fn dequantize(&self) -> PyNetwork {
        PyNetwork { params: self.inner.dequantize(), integration: self.integration }
    }

    fn evaluate<'py>(&self, py: Python<'py>, seqs: Vec<PyRef<'py, PySequence>>) -> PyResult<Bound<'py, PyAny>> {
        let e = quantizer::evaluate_quantized(&self.inner, &unwrap_seqs(&seqs), &self.integration).map_err(core_err)?;
        to_py(py, &e)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        quantizer::save_qmodel(&path, &self.inner, &self.integration).map_err(core_err)
    }
}

#[pyfunction]
#[pyo3(signature = (geometry, model, n, seed = 0))]
fn generate_phantoms(geometry: &PyGeometry, model: &str, n: usize, seed: u64) -> PyResult<Vec<PyPhantom>> {
    let m = TissueModel::by_name(model).map_err(core_err)?;
    let g = &geometry.inner;
    let set = phantom::generate_phantom_set(&g.mesh, &g.layout, &m, &RbfNoiseConfig::default(), n, seed)
        .map_err(core_err)?;
    Ok(set.into_iter().map(|inner| PyPhantom { inner }).collect())
}

#[pyfunction]
fn simulate_frame(phantom: &PyPhantom, geometry: &PyGeometry) -> PyResult<PyFrame> {
    let g = &geometry.inner;
    let inner = fem::simulate_frame(&phantom.inner, &g.mesh, &g.layout, &ForwardConfig::default()).map_err(core_err)?;
    Ok(PyFrame { inner })
}

#[pyfunction]
#[pyo3(signature = (geometry, sigma = Complex64::new(fem::DEFAULT_SALINE_SIGMA, 0.0)))]
fn reference_frame(geometry: &PyGeometry, sigma: Complex64) -> PyResult<PyFrame> {
    let g = &geometry.inner;
    let inner = fem::reference_frame(&g.mesh, &g.layout, sigma, &ForwardConfig::default(), None).map_err(core_err)?;
    Ok(PyFrame { inner })
}

#[pyfunction]
#[pyo3(signature = (frame, reference, label, gain = 0.02))]
fn normalize(frame: &PyFrame, reference: &PyFrame, label: usize, gain: f64) -> PyResult<PySequence> {
    let inner = datapipe::normalize(&frame.inner, &reference.inner, gain, label_of(label)?).map_err(core_err)?;
    Ok(PySequence { inner })
}

/// `(epoch, train_loss, train_acc, val_loss, val_acc)`.
type Epoch = (usize, f64, f64, f64, f64);

/// Trains a fresh network; returns it with the per-epoch metrics.
#[pyfunction]
#[pyo3(signature = (train, validation, epochs = 500, batch_size = 100, learning_rate = 1e-3, seed = 0, substeps = 10, dt = 0.01))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    train: Vec<PyRef<'py, PySequence>>,
    validation: Vec<PyRef<'py, PySequence>>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
    substeps: usize,
    dt: f64,
) -> PyResult<(PyNetwork, Vec<Epoch>)> {
    let split = DatasetSplit { train: unwrap_seqs(&train), validation: unwrap_seqs(&validation), test: vec![], split_seed: 0 };
    let tc = TrainConfig { epochs, batch_size, learning_rate, seed, ..TrainConfig::default() };
    let ic = integration(substeps, dt);
    let (params, report) = py.detach(|| trainer::train(&split, &tc, &ic)).map_err(core_err)?;
    let curve = report.epochs.iter().map(|m| (m.epoch, m.train_loss, m.train_acc, m.val_loss, m.val_acc)).collect();
    Ok((PyNetwork { params, integration: ic }, curve))
}

#[pyfunction]
fn hardware_budget(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &analog::hardware_budget(&HardwareBudget::default()).map_err(core_err)?)
}

/// Runs generate, train, quantize, eval and budget into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml = None))]
fn run_pipeline<'py>(py: Python<'py>, out_dir: PathBuf, config_toml: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = match config_toml {
        Some(text) => RunConfig::from_toml(text).map_err(core_err)?,
        None => RunConfig::default(),
    };
    cfg.out_dir = out_dir;
    cfg.validate().map_err(core_err)?;
    let s = py.detach(|| cli::cmd_pipeline(&cfg)).map_err(cli_err)?;
    let d = PyDict::new(py);
    d.set_item("generate", to_py(py, &s.generate)?)?;
    d.set_item("train", to_py(py, &s.train)?)?;
    let sweep: Vec<(String, f64)> = s.sweep.iter().map(|r| (r.precision.to_string(), r.evaluation.accuracy)).collect();
    d.set_item("sweep", sweep)?;
    d.set_item("eval", to_py(py, &s.eval)?)?;
    d.set_item("budget", to_py(py, &s.budget)?)?;
    Ok(d)
}

#[pymodule]
fn bioz(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGeometry>()?;
    m.add_class::<PyPhantom>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyQuantized>()?;
    m.add_function(wrap_pyfunction!(generate_phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_frame, m)?)?;
    m.add_function(wrap_pyfunction!(reference_frame, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(hardware_budget, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
