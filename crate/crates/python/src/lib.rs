//! Python bindings for the bicovg engine.
//!
//! Tensors cross the boundary as flat `list[float]` plus a shape tuple so the
//! module has no numpy dependency.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use bicovg::config::{goodness_dims, Config, Execution, Split};
use bicovg::data::{load_split, Dataset, SyntheticSpec};
use bicovg::run::{evaluate, fit, EvalReport, FitOptions};
use bicovg::training::TrainState;
use bicovg::{checkpoint, diagnostics, memmodel, Error, Shape4, Tensor4};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(values: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Tensor4> {
    Tensor4::from_vec(Shape4::new(shape.0, shape.1, shape.2, shape.3), values).map_err(py_err)
}

fn parse_execution(s: &str) -> PyResult<Execution> {
    match s {
        "standard" => Ok(Execution::Standard),
        "interleaved" => Ok(Execution::Interleaved),
        _ => Err(PyValueError::new_err(format!("unknown execution {s:?}"))),
    }
}

/// Validated model and training configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML, applying `key=value` overrides.
    #[new]
    #[pyo3(signature = (toml, overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyConfig {
            inner: Config::from_toml_with(toml, &overrides).map_err(py_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (name, overrides = Vec::new()))]
    fn preset(name: &str, overrides: Vec<String>) -> PyResult<Self> {
        let src = bicovg::config::preset_source(name).map_err(py_err)?;
        Self::new(src, overrides)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.arch.num_blocks()
    }

    fn goodness_dims(&self) -> Vec<usize> {
        goodness_dims(&self.inner.arch)
    }

    /// Half-open `(start, end)` layer ranges of the blocks of size `m`.
    fn groups(&self, m: usize) -> Vec<(usize, usize)> {
        self.inner.arch.groups(m).into_iter().map(|r| (r.start, r.end)).collect()
    }

    fn fal_boundaries(&self, m: usize) -> Vec<usize> {
        self.inner.arch.fal_boundaries(m)
    }

    fn __repr__(&self) -> String {
        format!("Config(name={:?}, blocks={})", self.inner.name, self.inner.arch.num_blocks())
    }
}

/// Images and integer labels.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(images: Vec<f64>, shape: (usize, usize, usize, usize), labels: Vec<usize>, num_classes: usize) -> PyResult<Self> {
        Ok(PyDataset {
            inner: Dataset::new(tensor(images, shape)?, labels, num_classes, None).map_err(py_err)?,
        })
    }

    /// Loads `train` or `test` from a directory of IDX files or a raw manifest.
    #[staticmethod]
    fn load(dir: PathBuf, split: &str, num_classes: usize) -> PyResult<Self> {
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(PyValueError::new_err(format!("unknown split {split:?}"))),
        };
        Ok(PyDataset {
            inner: load_split(&dir, split, num_classes).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.images.shape();
        (s.b, s.c, s.h, s.w)
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.inner.len()) {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(PyDataset {
            inner: self.inner.subset(&indices),
        })
    }
}

/// Generates the synthetic layout corpus; returns `(train, test)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, train = 5000, test = 1000, noise = 0.5))]
fn synthetic(seed: u64, train: usize, test: usize, noise: f64) -> PyResult<(PyDataset, PyDataset)> {
    let spec = SyntheticSpec {
        seed,
        train,
        test,
        noise,
        ..SyntheticSpec::default()
    };
    let (a, b) = spec.generate().map_err(py_err)?;
    Ok((PyDataset { inner: a }, PyDataset { inner: b }))
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let d = pyo3::types::PyDict::new(py);
    d.set_item("samples", r.samples)?;
    d.set_item("top1", r.top1())?;
    d.set_item("ce", r.layers.iter().map(|l| l.ce).collect::<Vec<_>>())?;
    d.set_item("best_pred_layer", r.best_pred_layer)?;
    d.set_item("best_pred_top1", r.best_pred_top1)?;
    d.set_item("fused_top1", r.fused_top1)?;
    d.set_item("fused_ce", r.fused_ce)?;
    Ok(d)
}

/// Flat row-major logits with their `(batch, classes)` shape.
type FlatLogits = (Vec<f64>, (usize, usize));

/// A network with per-group optimisers and RNG streams.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: TrainState,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: TrainState::new(config.inner.clone()).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step
    }

    /// Length of the cosine schedule; 0 keeps the rate at `lr_start`.
    #[getter]
    fn total_steps(&self) -> usize {
        self.inner.total_steps
    }

    #[setter]
    fn set_total_steps(&mut self, n: usize) {
        self.inner.total_steps = n;
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn fusion_weights(&self) -> Option<Vec<f64>> {
        self.inner.fusion_alpha.as_ref().map(|a| bicovg::fusion::FusionHead { alpha: a.clone() }.weights())
    }

    /// One optimisation step on a batch; returns per-exit losses.
    fn train_step(&mut self, x: Vec<f64>, shape: (usize, usize, usize, usize), labels: Vec<usize>) -> PyResult<Vec<f64>> {
        let x = tensor(x, shape)?;
        let step = self.inner.step;
        Ok(self.inner.train_step(&x, &labels, step).map_err(py_err)?.losses)
    }

    /// Per-exit logits as `(flat values, (batch, classes))` pairs.
    fn logits(&mut self, x: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Vec<FlatLogits>> {
        let x = tensor(x, shape)?;
        let out = self.inner.head_logits(&x).map_err(py_err)?;
        Ok(out
            .into_iter()
            .map(|t| {
                let s = t.shape();
                (t.into_data(), (s.b, s.c))
            })
            .collect())
    }

    /// Trains for `epochs` (default: configured), fits the fusion head and
    /// returns the test report.
    #[pyo3(signature = (train, test = None, epochs = None))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train: &PyDataset,
        test: Option<&PyDataset>,
        epochs: Option<usize>,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let opts = FitOptions {
            epochs,
            ..FitOptions::default()
        };
        let s = fit(&mut self.inner, &train.inner, test.map(|t| &t.inner), &opts, |_| {}).map_err(py_err)?;
        let d = match &s.test {
            Some(r) => report_dict(py, r)?,
            None => pyo3::types::PyDict::new(py),
        };
        d.set_item("epochs", s.epochs)?;
        d.set_item("steps", s.steps)?;
        d.set_item("seconds", s.seconds)?;
        d.set_item("fusion_weights", s.fusion.weights)?;
        d.set_item("n_eff", s.fusion.n_eff)?;
        Ok(d)
    }

    fn evaluate<'py>(&mut self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let r = evaluate(&mut self.inner, &data.inner).map_err(py_err)?;
        report_dict(py, &r)
    }
}

/// Analytic peak bytes for training `config` in blocks of `m`.
#[pyfunction]
#[pyo3(signature = (config, m, batch, execution = "standard"))]
fn estimate_peak(config: &PyConfig, m: usize, batch: usize, execution: &str) -> PyResult<usize> {
    let t = &config.inner.train;
    memmodel::estimate_peak(&config.inner.arch, m, t.optimizer, parse_execution(execution)?, batch, t.precision)
        .map(|e| e.peak_bytes)
        .map_err(py_err)
}

#[pyfunction]
fn decline_area(acc: Vec<f64>) -> PyResult<f64> {
    diagnostics::decline_area(&acc).map_err(py_err)
}

#[pyfunction]
fn tail_retention(acc: Vec<f64>) -> PyResult<f64> {
    diagnostics::tail_retention(&acc).map_err(py_err)
}

#[pyfunction]
fn shallow_deep_gain(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    diagnostics::shallow_deep_gain(&a, &b).map_err(py_err)
}

#[pyfunction]
fn n_eff(w: Vec<f64>) -> PyResult<f64> {
    diagnostics::n_eff(&w).map_err(py_err)
}

/// Per-channel region energies of `f` at scale `s`, shape `(B, C·s²)`.
#[pyfunction]
fn pcs_goodness(f: Vec<f64>, shape: (usize, usize, usize, usize), s: usize) -> PyResult<Vec<f64>> {
    Ok(bicovg::goodness::pcs_goodness(&tensor(f, shape)?, s).map_err(py_err)?.into_data())
}

#[pymodule]
fn bicovg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_peak, m)?)?;
    m.add_function(wrap_pyfunction!(decline_area, m)?)?;
    m.add_function(wrap_pyfunction!(tail_retention, m)?)?;
    m.add_function(wrap_pyfunction!(shallow_deep_gain, m)?)?;
    m.add_function(wrap_pyfunction!(n_eff, m)?)?;
    m.add_function(wrap_pyfunction!(pcs_goodness, m)?)?;
    Ok(())
}
