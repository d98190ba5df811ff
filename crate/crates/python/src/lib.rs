//! Python bindings: graphs, calibration, fine-tuning and the int8 engine.
//!
//! Tensors cross the boundary as a shape plus flat row-major data;
//! `Tensor(list(a.shape), a.ravel().tolist())` converts a numpy array.

use fat_core::engine::{self, QuantizedModel};
use fat_core::io::{self, Dataset};
use fat_core::quant::{self, Granularity, QuantConfig, QuantMode, QuantPlan, QuantScheme};
use fat_core::tune::{self, PointwiseScales, TrainConfig, TrainGroups};
use fat_core::{train, transforms, zoo, Graph, Tensor};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: fat_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Tensor", module = "fatquant", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Tensor::new(shape, data).map(Self).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        self.0.max_abs_diff(&other.0).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

#[pyclass(name = "Graph", module = "fatquant", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGraph(Graph);

#[pymethods]
impl PyGraph {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        io::load_model(path).map(Self).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_model(&self.0, path).map_err(err)
    }

    fn forward(&self, x: &PyTensor) -> PyResult<PyTensor> {
        self.0.forward(&x.0).map(PyTensor).map_err(err)
    }

    /// `(id, kind)` of every layer in execution order.
    fn layers(&self) -> Vec<(String, String)> {
        self.0
            .layers()
            .iter()
            .map(|l| (l.id.clone(), l.kind.name().to_string()))
            .collect()
    }
}

#[pyclass(name = "QuantConfig", module = "fatquant", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(QuantConfig);

#[pymethods]
impl PyConfig {
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(json_err)
    }

    /// Ids of the activation sites.
    fn sites(&self) -> Vec<String> {
        self.0.activations.keys().cloned().collect()
    }
}

#[pyclass(name = "PointwiseScales", module = "fatquant", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScales(PointwiseScales);

#[pymethods]
impl PyScales {
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }
}

#[pyclass(name = "QuantizedModel", module = "fatquant", frozen, skip_from_py_object)]
struct PyModel(QuantizedModel);

#[pymethods]
impl PyModel {
    #[pyo3(signature = (x, batch = 100))]
    fn run(&self, x: &PyTensor, batch: usize) -> PyResult<PyTensor> {
        engine::run_int8_batched(&self.0, &x.0, batch)
            .map(PyTensor)
            .map_err(err)
    }

    /// Serialized `.fatq` bytes.
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &engine::export(&self.0))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        engine::import(data).map(Self).map_err(err)
    }
}

/// Outcome of [`finetune`].
#[pyclass(name = "FinetuneResult", module = "fatquant", frozen, get_all)]
struct PyFinetune {
    config: PyConfig,
    scales: Option<PyScales>,
    epoch_losses: Vec<f64>,
}

fn scheme(bits: u32, mode: &str, granularity: Option<&str>) -> PyResult<QuantScheme> {
    let mode = match mode {
        "sym" => QuantMode::Symmetric,
        "asym" => QuantMode::Asymmetric,
        m => return Err(PyValueError::new_err(format!("mode must be sym or asym, got {m}"))),
    };
    let mut s = QuantScheme {
        bits,
        mode,
        ..QuantScheme::default()
    };
    if let Some(g) = granularity {
        let g = match g {
            "scalar" => Granularity::PerTensor,
            "vector" => Granularity::PerChannel { axis: 0 },
            g => {
                return Err(PyValueError::new_err(format!(
                    "granularity must be scalar or vector, got {g}"
                )))
            }
        };
        s.weights = g;
        s.depthwise = g;
    }
    Ok(s)
}

#[pyfunction]
fn load_idx_images(path: &str) -> PyResult<PyTensor> {
    Dataset::load_idx(path, None)
        .map(|d| PyTensor(d.into_images()))
        .map_err(err)
}

#[pyfunction]
fn load_idx_labels(path: &str) -> PyResult<Vec<u32>> {
    io::read_idx_labels(path).map_err(err)
}

#[pyfunction]
fn mnist_cnn(seed: u64) -> PyGraph {
    PyGraph(zoo::mnist_cnn(seed))
}

#[pyfunction]
fn toy_net(seed: u64) -> PyGraph {
    PyGraph(zoo::toy_net(seed))
}

#[pyfunction]
fn toy_input(seed: u64, n: usize) -> PyTensor {
    PyTensor(zoo::toy_input(seed, n))
}

#[pyfunction]
fn fold_batch_norm(g: &PyGraph) -> PyResult<PyGraph> {
    transforms::fold_batch_norm(&g.0).map(PyGraph).map_err(err)
}

/// Returns the rescaled graph and the JSON rescale report.
#[pyfunction]
fn dws_rescale(g: &PyGraph, calib: &PyTensor) -> PyResult<(PyGraph, String)> {
    let (r, report) = transforms::dws_rescale_default(&g.0, &calib.0).map_err(err)?;
    Ok((PyGraph(r), serde_json::to_string(&report).map_err(json_err)?))
}

#[pyfunction]
#[pyo3(signature = (g, images, bits = 8, mode = "sym", granularity = None, batch = 100))]
fn calibrate(
    g: &PyGraph,
    images: &PyTensor,
    bits: u32,
    mode: &str,
    granularity: Option<&str>,
    batch: usize,
) -> PyResult<PyConfig> {
    let plan = QuantPlan::new(&g.0).map_err(err)?;
    let stats = quant::calibrate(&g.0, &plan, &images.0, batch).map_err(err)?;
    quant::build_params(&g.0, &plan, &stats, scheme(bits, mode, granularity)?)
        .map(PyConfig)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (g, config, images, epochs = 8, batch = 32, lr = 1e-3, train = "thresholds", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    g: &PyGraph,
    config: &PyConfig,
    images: &PyTensor,
    epochs: usize,
    batch: usize,
    lr: f64,
    train: &str,
    seed: u64,
) -> PyResult<PyFinetune> {
    let train = match train {
        "thresholds" => TrainGroups::Thresholds,
        "pointwise" => TrainGroups::Pointwise,
        "both" => TrainGroups::Both,
        t => {
            return Err(PyValueError::new_err(format!(
                "train must be thresholds, pointwise or both, got {t}"
            )))
        }
    };
    let tc = TrainConfig {
        epochs,
        batch,
        lr,
        seed,
        train,
        ..TrainConfig::default()
    };
    let out = tune::finetune(&g.0, &config.0, None, &images.0, &tc).map_err(err)?;
    Ok(PyFinetune {
        config: PyConfig(out.config),
        scales: out.scales.map(PyScales),
        epoch_losses: out.epoch_losses,
    })
}

#[pyfunction]
#[pyo3(signature = (g, config, images, scales = None, batch = 100))]
fn distillation_rmse(
    g: &PyGraph,
    config: &PyConfig,
    images: &PyTensor,
    scales: Option<&PyScales>,
    batch: usize,
) -> PyResult<f64> {
    tune::distillation_rmse(&g.0, &config.0, scales.map(|s| &s.0), &images.0, batch).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (g, config, scales = None))]
fn compile(g: &PyGraph, config: &PyConfig, scales: Option<&PyScales>) -> PyResult<PyModel> {
    engine::compile(&g.0, &config.0, scales.map(|s| &s.0))
        .map(PyModel)
        .map_err(err)
}

/// Share of rows whose arg-max matches the label.
#[pyfunction]
fn top1(logits: &PyTensor, labels: Vec<u32>) -> f64 {
    train::top1(&logits.0, &labels)
}

#[pymodule]
fn fatquant(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScales>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFinetune>()?;
    m.add_function(wrap_pyfunction!(load_idx_images, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx_labels, m)?)?;
    m.add_function(wrap_pyfunction!(mnist_cnn, m)?)?;
    m.add_function(wrap_pyfunction!(toy_net, m)?)?;
    m.add_function(wrap_pyfunction!(toy_input, m)?)?;
    m.add_function(wrap_pyfunction!(fold_batch_norm, m)?)?;
    m.add_function(wrap_pyfunction!(dws_rescale, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(distillation_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(compile, m)?)?;
    m.add_function(wrap_pyfunction!(top1, m)?)?;
    Ok(())
}
