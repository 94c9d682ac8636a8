use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use zsad_core::eval::{evaluate as core_evaluate, infer as core_infer, EvalOptions};
use zsad_core::io::{self, Checkpoint, SynthSpec};
use zsad_core::metrics::{self, MetricError, ProSweep, PRO_QUANTILES};
use zsad_core::numcore::NumError;
use zsad_core::{Error, FeatureBundle, Mask, Scoring, TrainConfig};

create_exception!(zsad, FormatError, PyValueError, "Malformed bundle or checkpoint; `code` names the failure.");
create_exception!(zsad, TrainingDiverged, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Format(f) => {
            let err = FormatError::new_err(f.to_string());
            Python::attach(|py| {
                let _ = err.value(py).setattr("code", f.code());
            });
            err
        }
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::Num(NumError::NonFinite { .. }) => TrainingDiverged::new_err(e.to_string()),
        Error::Num(_) | Error::Config(_) | Error::Data(_) | Error::Metric(_) => PyValueError::new_err(e.to_string()),
    }
}

fn metric_err(e: MetricError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Per-image features with optional ground truth.
#[pyclass(name = "Bundle", module = "zsad")]
struct PyBundle {
    inner: FeatureBundle,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        io::read_bundle(path).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        io::decode_bundle(data).map(|inner| Self { inner }).map_err(to_py)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_bundle(&self.inner, path).map_err(to_py)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        io::encode_bundle(&self.inner).map_err(to_py)
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        self.inner.grid
    }

    #[getter]
    fn label(&self) -> u8 {
        self.inner.label
    }

    #[getter]
    fn category(&self) -> String {
        self.inner.category.clone()
    }

    #[getter]
    fn source_id(&self) -> String {
        self.inner.source_id.clone()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    /// Ground truth as rows of 0/1, or `None`.
    fn mask(&self) -> Option<Vec<Vec<u8>>> {
        self.inner.mask.as_ref().map(|m| m.data.chunks(m.width).map(<[u8]>::to_vec).collect())
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.grid;
        format!("Bundle({:?}, grid={h}x{w}, label={})", self.inner.source_id, self.inner.label)
    }
}

/// Trained detector together with its training configuration.
#[pyclass(name = "Model", module = "zsad")]
struct PyModel {
    ckpt: Checkpoint,
    model: zsad_core::Model,
}

impl PyModel {
    fn from_checkpoint(ckpt: Checkpoint) -> PyResult<Self> {
        let model = ckpt.to_model().map_err(to_py)?;
        Ok(Self { ckpt, model })
    }

    fn scoring(&self, tau: Option<f64>, gamma: Option<f64>, top_k: Option<usize>) -> PyResult<Scoring> {
        let mut s = self.ckpt.train.scoring();
        s.tau = tau.unwrap_or(s.tau);
        s.gamma = gamma.unwrap_or(s.gamma);
        s.top_k = top_k.unwrap_or(s.top_k);
        if !(s.tau > 0.0) || !(0.0..=1.0).contains(&s.gamma) || s.top_k == 0 {
            return Err(PyValueError::new_err(format!("invalid scoring tau={} gamma={} top_k={}", s.tau, s.gamma, s.top_k)));
        }
        Ok(s)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::from_checkpoint(io::read_checkpoint(path).map_err(to_py)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_checkpoint(&self.ckpt, path).map_err(to_py)
    }

    /// Training configuration as JSON.
    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.ckpt.train).map_err(json_err)
    }

    /// Scores and the fused grid map for one bundle.
    #[pyo3(signature = (bundle, tau=None, gamma=None, top_k=None))]
    fn infer<'py>(
        &self,
        py: Python<'py>,
        bundle: PyRef<'_, PyBundle>,
        tau: Option<f64>,
        gamma: Option<f64>,
        top_k: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let scoring = self.scoring(tau, gamma, top_k)?;
        let out = core_infer(&self.model, &bundle.inner, scoring).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("s_global", out.scores.s_global)?;
        d.set_item("s_local", out.scores.s_local)?;
        d.set_item("s_final", out.scores.s_final)?;
        let m = &out.maps.fused;
        let rows: Vec<Vec<f64>> = m.data.chunks(m.width).map(<[f64]>::to_vec).collect();
        d.set_item("map", rows)?;
        d.set_item("scale_weights", out.maps.scale_weights)?;
        Ok(d)
    }

    /// Evaluation report as JSON. `pro_thresholds=0` sweeps every distinct score.
    #[pyo3(signature = (bundles, fpr_limit=0.3, pro_thresholds=PRO_QUANTILES))]
    fn evaluate(&self, bundles: Vec<PyRef<'_, PyBundle>>, fpr_limit: f64, pro_thresholds: usize) -> PyResult<String> {
        let data: Vec<FeatureBundle> = bundles.iter().map(|b| b.inner.clone()).collect();
        let opts = EvalOptions {
            scoring: self.ckpt.train.scoring(),
            fpr_limit,
            sweep: if pro_thresholds == 0 { ProSweep::Exhaustive } else { ProSweep::Quantiles(pro_thresholds) },
        };
        let mut report = core_evaluate(&self.model, &data, &opts).map_err(to_py)?.report;
        report.meta.train_config = Some(self.ckpt.train.clone());
        Ok(report.to_json())
    }
}

/// Writes a synthetic dataset under `out` and returns the number of bundles.
#[pyfunction]
#[pyo3(signature = (out, categories=3, samples=60, anomaly_rate=0.5, grid=(12, 12), seed=7))]
fn gen_synthetic(out: PathBuf, categories: usize, samples: usize, anomaly_rate: f64, grid: (usize, usize), seed: u64) -> PyResult<usize> {
    let spec = SynthSpec { n_categories: categories, samples_per_split: samples, anomaly_rate, grid, seed, ..SynthSpec::default() };
    let ds = io::gen_synthetic(&spec).map_err(to_py)?;
    let manifest = io::write_dataset(&out, &ds).map_err(to_py)?;
    Ok(manifest.categories.iter().map(|c| c.train.len() + c.test.len()).sum())
}

#[pyfunction]
#[pyo3(signature = (root, split="train", only=Vec::new(), exclude=Vec::new()))]
fn load_dataset(root: PathBuf, split: &str, only: Vec<String>, exclude: Vec<String>) -> PyResult<Vec<PyBundle>> {
    let data = io::load_dataset(root, split, &only, &exclude).map_err(to_py)?;
    Ok(data.into_iter().map(|inner| PyBundle { inner }).collect())
}

/// Trains on `bundles`; `config` is a JSON training configuration.
/// Returns the model and the per-step loss history as dicts.
#[pyfunction]
#[pyo3(signature = (bundles, config=None, seed=None, epochs=None))]
fn train<'py>(
    py: Python<'py>,
    bundles: Vec<PyRef<'_, PyBundle>>,
    config: Option<&str>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let mut cfg: TrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => TrainConfig::desk(),
    };
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    let data: Vec<FeatureBundle> = bundles.iter().map(|b| b.inner.clone()).collect();
    let trained = py.detach(|| zsad_core::train::train(&data, &cfg)).map_err(to_py)?;
    let history = trained
        .history
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("step", r.step)?;
            for (k, v) in [("seg", r.seg), ("cls", r.cls), ("vae", r.vae), ("reg", r.reg), ("total", r.total), ("lr", r.lr), ("min_cos", r.min_cos)] {
                d.set_item(k, v)?;
            }
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let ckpt = Checkpoint::from_model(&trained.model, &cfg, trained.rng, None);
    Ok((PyModel { ckpt, model: trained.model }, history))
}

/// Worst relative finite-difference error per module.
#[pyfunction]
#[pyo3(signature = (seed=0, step=1e-5))]
fn grad_check(py: Python<'_>, seed: u64, step: f64) -> PyResult<Vec<(String, f64)>> {
    let report = py.detach(|| zsad_core::verify::grad_check(seed, step)).map_err(to_py)?;
    Ok(report.modules.into_iter().map(|m| (m.module, m.worst_rel_error)).collect())
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(metric_err)
}

#[pyfunction]
fn f1_max(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::f1_max(&scores, &labels).map_err(metric_err)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::average_precision(&scores, &labels).map_err(metric_err)
}

/// Region-overlap area; maps and masks are lists of equally shaped 2-D lists.
#[pyfunction]
#[pyo3(signature = (maps, masks, fpr_limit=0.3, thresholds=0))]
fn pro(maps: Vec<Vec<Vec<f64>>>, masks: Vec<Vec<Vec<u8>>>, fpr_limit: f64, thresholds: usize) -> PyResult<f64> {
    let masks: Vec<Mask> = masks
        .into_iter()
        .map(|rows| {
            let (height, width) = (rows.len(), rows.first().map_or(0, Vec::len));
            if rows.iter().any(|r| r.len() != width) {
                return Err(PyValueError::new_err("ragged mask"));
            }
            Ok(Mask { height, width, data: rows.concat() })
        })
        .collect::<PyResult<_>>()?;
    let flat: Vec<Vec<f64>> = maps.into_iter().map(|m| m.concat()).collect();
    let refs: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
    let sweep = if thresholds == 0 { ProSweep::Exhaustive } else { ProSweep::Quantiles(thresholds) };
    metrics::pro(&refs, &masks, fpr_limit, sweep).map_err(metric_err)
}

#[pymodule]
fn zsad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBundle>()?;
    m.add_class::<PyModel>()?;
    m.add("FormatError", m.py().get_type::<FormatError>())?;
    m.add("TrainingDiverged", m.py().get_type::<TrainingDiverged>())?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(f1_max, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(pro, m)?)?;
    Ok(())
}
