//! Python bindings: scenarios, models, training, evaluation and the
//! ranking metrics.

use std::path::PathBuf;

use apsel_core::eval::{self, EvalOptions};
use apsel_core::graph::{GraphParams, ProximityOrder};
use apsel_core::model::{self, GnnModel, ModelConfig};
use apsel_core::scenario::{self, Point, ScenarioConfig};
use apsel_core::trainer::{self, DatasetSpec, Sample, TrainConfig, UeCount};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py_err(e: apsel_core::Error) -> PyErr {
    match e {
        apsel_core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Converts any serializable value into plain Python objects.
fn to_python<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn points(coords: Vec<(f64, f64)>) -> Vec<Point> {
    coords.into_iter().map(|(x, y)| Point::new(x, y)).collect()
}

fn scored_pairs(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Vec<(f64, bool)>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(scores.into_iter().zip(labels).collect())
}

/// AP deployment with per-AP shadowing maps. Coordinates are in km.
#[pyclass(name = "Scenario", module = "apsel", frozen)]
struct PyScenario {
    inner: scenario::Scenario,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (ap_count = 100, side_km = 1.0, sigma_db = ScenarioConfig::DEFAULT_SIGMA_SH_DB, decorrelation_m = ScenarioConfig::DEFAULT_DECORRELATION_M, resolution_m = ScenarioConfig::DEFAULT_RESOLUTION_M, seed = 14))]
    fn new(
        ap_count: usize,
        side_km: f64,
        sigma_db: f64,
        decorrelation_m: f64,
        resolution_m: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ScenarioConfig {
            ap_count,
            side_length_km: side_km,
            sigma_sh_db: sigma_db,
            decorrelation_distance_m: decorrelation_m,
            grid_resolution_m: resolution_m,
            seed,
        };
        let inner = scenario::Scenario::generate(&config).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = scenario::Scenario::load(&path).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[getter]
    fn ap_count(&self) -> usize {
        self.inner.ap_count()
    }

    #[getter]
    fn side_km(&self) -> f64 {
        self.inner.side_length_km()
    }

    #[getter]
    fn density_per_km2(&self) -> f64 {
        self.inner.density_per_km2()
    }

    #[getter]
    fn ap_positions(&self) -> Vec<(f64, f64)> {
        self.inner.ap_positions().iter().map(|p| (p.x, p.y)).collect()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, self.inner.config())
    }

    /// RSRP in dB of AP `ap` received at `(x, y)`.
    fn rsrp(&self, ap: usize, x: f64, y: f64) -> PyResult<f64> {
        if ap >= self.inner.ap_count() {
            return Err(PyValueError::new_err(format!("AP index {ap} out of range")));
        }
        self.inner.rsrp_from(ap, &Point::new(x, y)).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(ap_count={}, side_km={}, seed={})",
            self.inner.ap_count(),
            self.inner.side_length_km(),
            self.inner.config().seed
        )
    }
}

/// Two-stage GNN link-prediction model.
#[pyclass(name = "Model", module = "apsel")]
struct PyModel {
    inner: GnnModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (ap_count, seed = 1, feature_scale = ModelConfig::DEFAULT_FEATURE_SCALE, l2_normalize = false))]
    fn new(ap_count: usize, seed: u64, feature_scale: f64, l2_normalize: bool) -> PyResult<Self> {
        let config = ModelConfig {
            feature_scale,
            l2_normalize,
            ..ModelConfig::for_aps(ap_count)
        };
        let inner = GnnModel::new(config, seed).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = GnnModel::load(&path).map_err(to_py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    /// Hex digest identifying configuration and parameter values.
    #[getter]
    fn fingerprint(&self) -> String {
        format!("{:016x}", self.inner.fingerprint())
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step_count()
    }

    #[getter]
    fn ap_count(&self) -> usize {
        self.inner.config().hidden_dim
    }

    /// Scores the candidate-cluster links of UEs at `ues` (list of
    /// `(x, y)` in km). Returns one dict per UE.
    #[pyo3(signature = (scenario, ues, threshold = 0.5, c_ap = 5, c_ue = 10, c_hat_ue = 2))]
    #[allow(clippy::too_many_arguments)]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        scenario: &PyScenario,
        ues: Vec<(f64, f64)>,
        threshold: f64,
        c_ap: usize,
        c_ue: usize,
        c_hat_ue: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let s = &scenario.inner;
        if s.ap_count() != self.inner.config().hidden_dim {
            return Err(PyValueError::new_err(format!(
                "model expects {} APs, scenario has {}",
                self.inner.config().hidden_dim,
                s.ap_count()
            )));
        }
        let params = GraphParams { c_ap, c_ue, c_hat_ue };
        let sample = Sample::build(
            s,
            &ProximityOrder::new(s.ap_positions()),
            points(ues),
            &params,
            DatasetSpec::DEFAULT_D_DB,
        )
        .map_err(to_py_err)?;
        let predictions = model::predict(&sample.graph, &self.inner, None, threshold).map_err(to_py_err)?;
        to_python(py, &predictions)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(ap_count={}, steps={}, fingerprint={})",
            self.inner.config().hidden_dim,
            self.inner.step_count(),
            self.fingerprint()
        )
    }
}

/// Trains a fresh model on `scenario`; returns `(model, report)`.
#[pyfunction]
#[pyo3(signature = (scenario, n_graphs = 100, k_train = 100, val_graphs = 20, epochs = 20, learning_rate = 1e-3, patience = Some(5), c_ue = 10, seed = 1))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    n_graphs: usize,
    k_train: usize,
    val_graphs: usize,
    epochs: usize,
    learning_rate: f64,
    patience: Option<usize>,
    c_ue: usize,
    seed: u64,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let s = &scenario.inner;
    let graph = GraphParams {
        c_ue,
        ..GraphParams::default()
    };
    let config = TrainConfig {
        epochs,
        learning_rate,
        patience,
        ..TrainConfig::default()
    };
    let (model, report) = py
        .detach(|| -> apsel_core::Result<_> {
            let train_set = trainer::make_dataset(
                s,
                &DatasetSpec {
                    n_graphs,
                    ue_count: UeCount::Fixed(k_train),
                    graph,
                    ..DatasetSpec::training(seed)
                },
            )?;
            let validation = if val_graphs > 0 {
                Some(trainer::make_dataset(
                    s,
                    &DatasetSpec {
                        graph,
                        ..DatasetSpec::validation(seed, val_graphs)
                    },
                )?)
            } else {
                None
            };
            let mut model = GnnModel::new(ModelConfig::for_aps(s.ap_count()), seed)?;
            let report = trainer::train(&mut model, &train_set, validation.as_deref(), &config)?;
            Ok((model, report))
        })
        .map_err(to_py_err)?;
    Ok((PyModel { inner: model }, to_python(py, &report)?))
}

/// Evaluates `model` (or only the proximity baselines when `model` is
/// `None`) on held-out graphs; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (scenario, model = None, n_graphs = 100, k_min = 50, k_max = 150, c_ue = 10, threshold = 0.5, seed = 1))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    model: Option<PyRef<'py, PyModel>>,
    n_graphs: usize,
    k_min: usize,
    k_max: usize,
    c_ue: usize,
    threshold: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let s = &scenario.inner;
    let model = model.as_ref().map(|m| &m.inner);
    let spec = DatasetSpec {
        ue_count: UeCount::Uniform { min: k_min, max: k_max },
        graph: GraphParams {
            c_ue,
            ..GraphParams::default()
        },
        ..DatasetSpec::test(seed, n_graphs)
    };
    let options = EvalOptions {
        threshold,
        baselines: vec![1, 3],
        checkpoint: model.map(|m| format!("{:016x}", m.fingerprint())),
    };
    let report = py
        .detach(|| -> apsel_core::Result<_> {
            let data = trainer::make_dataset(s, &spec)?;
            let prox = ProximityOrder::new(s.ap_positions());
            Ok(eval::evaluate(model, &data, &prox, &options)?.report)
        })
        .map_err(to_py_err)?;
    to_python(py, &report)
}

/// Area under the ROC curve (ties count half).
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::auc(&scored_pairs(scores, labels)?).map_err(to_py_err)
}

/// Average precision over the step-wise precision-recall sweep.
#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::average_precision(&scored_pairs(scores, labels)?).map_err(to_py_err)
}

/// Precision and recall at `threshold`; `out_of_cluster` positives were
/// never scored but still count towards recall.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = 0.5, out_of_cluster = 0))]
fn precision_recall<'py>(
    py: Python<'py>,
    scores: Vec<f64>,
    labels: Vec<bool>,
    threshold: f64,
    out_of_cluster: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let pr = eval::precision_recall(&scored_pairs(scores, labels)?, out_of_cluster, threshold);
    to_python(py, &pr)
}

#[pymodule]
fn apsel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(precision_recall, m)?)?;
    Ok(())
}
