//! Python bindings. Matrices cross the boundary as lists of rows.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use circuitdup_core::backbone::{self, BackboneWeights, ImageTensor};
use circuitdup_core::evalsel;
use circuitdup_core::ingest::{self, SyntheticParams};
use circuitdup_core::model_io::{self, ReferenceBundle};
use circuitdup_core::reduce::{self, FeatureMatrix};
use circuitdup_core::semisup::{self, ClassifierParams, SeedSet};
use circuitdup_core::{cli, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Input { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for circuitdup_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<FeatureMatrix> {
    FeatureMatrix::from_rows(&rows).py()
}

fn to_rows(m: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|i| m.row(i).to_vec()).collect()
}

#[pyclass(name = "CircuitSpec", module = "circuitdup", frozen, eq, hash, from_py_object)]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct PyCircuitSpec(backbone::CircuitSpec);

#[pymethods]
impl PyCircuitSpec {
    /// `CircuitSpec()` is the standard path; `CircuitSpec(i, j)` repeats layers i..=j.
    #[new]
    #[pyo3(signature = (entry=None, exit=None))]
    fn new(entry: Option<usize>, exit: Option<usize>) -> PyResult<Self> {
        match (entry, exit) {
            (None, None) => Ok(Self(backbone::CircuitSpec::Standard)),
            (Some(i), Some(j)) => Ok(Self(backbone::CircuitSpec::duplicated(i, j))),
            _ => Err(PyValueError::new_err("give both entry and exit, or neither")),
        }
    }

    #[staticmethod]
    fn parse(s: &str) -> PyResult<Self> {
        s.parse().map(Self).py()
    }

    #[getter]
    fn is_standard(&self) -> bool {
        self.0.is_standard()
    }

    #[getter]
    fn bounds(&self) -> Option<(usize, usize)> {
        self.0.bounds()
    }

    #[getter]
    fn span(&self) -> usize {
        self.0.span()
    }

    fn validate(&self, num_layers: usize) -> PyResult<()> {
        self.0.validate(num_layers).py()
    }

    fn layer_path(&self, num_layers: usize) -> PyResult<Vec<usize>> {
        self.0.validate(num_layers).py()?;
        Ok(backbone::effective_layer_path(self.0, num_layers))
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }

    fn __repr__(&self) -> String {
        format!("CircuitSpec('{}')", self.0)
    }
}

#[pyfunction]
fn enumerate_circuits(num_layers: usize) -> PyResult<Vec<PyCircuitSpec>> {
    Ok(backbone::enumerate_circuits(num_layers)
        .py()?
        .into_iter()
        .map(PyCircuitSpec)
        .collect())
}

#[pyclass(name = "ModelConfig", module = "circuitdup", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModelConfig(backbone::ModelConfig);

#[pymethods]
impl PyModelConfig {
    /// Defaults to ViT-B/16 at 512px; pass a JSON object to override fields.
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let cfg: backbone::ModelConfig = match json {
            Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => Default::default(),
        };
        cfg.validate().py()?;
        Ok(Self(cfg))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("model config serializes")
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.0.num_layers
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.0.hidden_dim
    }

    #[getter]
    fn image_side(&self) -> usize {
        self.0.image_side
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.0.num_patches()
    }
}

#[pyclass(name = "Backbone", module = "circuitdup", frozen)]
struct PyBackbone {
    config: backbone::ModelConfig,
    weights: BackboneWeights,
    fingerprint: String,
}

#[pymethods]
impl PyBackbone {
    #[staticmethod]
    fn synthesize(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        let weights = model_io::synthesize_weights(&config.0, seed);
        let fingerprint = model_io::fingerprint_weights(&weights, &config.0).py()?;
        Ok(Self {
            config: config.0.clone(),
            weights,
            fingerprint: fingerprint.0,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf, config: &PyModelConfig) -> PyResult<Self> {
        let loaded = model_io::load_weights(&path, &config.0).py()?;
        Ok(Self {
            config: loaded.config,
            weights: loaded.weights,
            fingerprint: loaded.fingerprint.0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<String> {
        Ok(model_io::save_weights(&path, &self.weights, &self.config).py()?.0)
    }

    #[getter]
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig(self.config.clone())
    }

    /// Pooled, unit-norm embedding of a CHW image given as a flat list.
    #[pyo3(signature = (image, circuit=None))]
    fn embed(&self, image: Vec<f32>, circuit: Option<PyCircuitSpec>) -> PyResult<Vec<f32>> {
        let img = ImageTensor::new(self.config.image_side, image).py()?;
        let c = circuit.map_or(backbone::CircuitSpec::Standard, |c| c.0);
        backbone::embed_image(&img, &self.weights, &self.config, c).py()
    }

    fn embed_sweep(&self, image: Vec<f32>, circuits: Vec<PyCircuitSpec>) -> PyResult<Vec<Vec<f32>>> {
        let img = ImageTensor::new(self.config.image_side, image).py()?;
        let cs: Vec<_> = circuits.iter().map(|c| c.0).collect();
        backbone::embed_image_sweep(&img, &self.weights, &self.config, &cs)
            .py()?
            .into_iter()
            .map(|r| r.py())
            .collect()
    }

    /// Parity check against a reference bundle; returns per-case deviations and overall pass.
    #[pyo3(signature = (bundle, tolerance=None))]
    fn verify(&self, bundle: PathBuf, tolerance: Option<f32>) -> PyResult<(bool, Vec<(String, f32)>)> {
        let mut b = ReferenceBundle::read(&bundle).py()?;
        if let Some(t) = tolerance {
            b.tolerance = t;
        }
        let report = model_io::verify_reference(&self.weights, &self.config, &b).py()?;
        let cases = report
            .cases
            .iter()
            .map(|c| (c.circuit.to_string(), c.max_abs_deviation))
            .collect();
        Ok((report.pass, cases))
    }

    fn write_reference(&self, path: PathBuf, image: Vec<f32>, circuits: Vec<PyCircuitSpec>, tolerance: f32) -> PyResult<()> {
        let img = ImageTensor::new(self.config.image_side, image).py()?;
        let cs: Vec<_> = circuits.iter().map(|c| c.0).collect();
        ReferenceBundle::generate(&self.weights, &self.config, img, &cs, tolerance)
            .py()?
            .write(&path)
            .py()
    }
}

#[pyclass(name = "Pca", module = "circuitdup", frozen)]
struct PyPca(reduce::PcaModel);

#[pymethods]
impl PyPca {
    #[staticmethod]
    fn fit(x: Vec<Vec<f64>>, out_dim: usize) -> PyResult<Self> {
        Ok(Self(reduce::fit_pca(&matrix(x)?, out_dim).py()?))
    }

    fn transform(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.0.transform(&matrix(x)?).py()?))
    }

    #[getter]
    fn explained_variance(&self) -> Vec<f64> {
        self.0.explained_variance.clone()
    }

    #[getter]
    fn components(&self) -> Vec<Vec<f64>> {
        (0..self.0.out_dim).map(|k| self.0.component(k).to_vec()).collect()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.0.mean.clone()
    }
}

/// Run one classifier; `seeds` maps row index to class id.
/// Returns `(labels, confidence)` for every row.
#[pyfunction]
fn classify(
    method: &str,
    x: Vec<Vec<f64>>,
    seeds: BTreeMap<usize, usize>,
    num_classes: usize,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let method: semisup::Method = method.parse().py()?;
    let x = matrix(x)?;
    let out = semisup::classify(
        method,
        &x,
        &SeedSet::new(seeds),
        num_classes,
        &ClassifierParams::default(),
        None,
    )
    .py()?;
    Ok((out.labels, out.confidence))
}

#[pyfunction]
fn method_names() -> Vec<&'static str> {
    semisup::Method::ALL.iter().map(|m| m.name()).collect()
}

/// Returns a dict with accuracy, macro_f1, per_class_f1, per_class_recall and support.
#[pyfunction]
fn compute_metrics(py: Python<'_>, predicted: Vec<usize>, truth: Vec<usize>, num_classes: usize) -> PyResult<Py<PyAny>> {
    let r = evalsel::compute_metrics(&predicted, &truth, num_classes).py()?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("macro_f1", r.macro_f1)?;
    d.set_item("per_class_f1", r.per_class_f1)?;
    d.set_item("per_class_recall", r.per_class_recall)?;
    d.set_item("support", r.support)?;
    Ok(d.into_any().unbind())
}

/// Write a synthetic image dataset plus `manifest.csv`; returns the record count.
#[pyfunction]
#[pyo3(signature = (root, num_classes=4, per_class_train=12, per_class_test=6, image_side=64, seed=7))]
fn make_synthetic_dataset(
    root: PathBuf,
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    image_side: usize,
    seed: u64,
) -> PyResult<usize> {
    let params = SyntheticParams {
        num_classes,
        per_class_train,
        per_class_test,
        image_side,
        seed,
    };
    Ok(cli::cmd_synth(&root, &params).py()?.records.len())
}

/// Full pipeline from a run-config JSON string; returns the written artifact paths.
#[pyfunction]
fn run_config(json: &str) -> PyResult<Vec<PathBuf>> {
    let cfg: cli::RunConfig = serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(cli::cmd_run(&cfg).py()?.files)
}

#[pyfunction]
fn load_image(path: PathBuf, side: usize) -> PyResult<Vec<f32>> {
    let spec = ingest::PreprocessSpec {
        resize_side: side,
        ..Default::default()
    };
    Ok(ingest::load_and_preprocess(&path, &spec).py()?.data)
}

#[pymodule]
fn circuitdup(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCircuitSpec>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyPca>()?;
    m.add_function(wrap_pyfunction!(enumerate_circuits, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(method_names, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    Ok(())
}
