//! Python bindings: point sets, dataset statistics, energies, bridge checks,
//! training, sampling and metrics.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use prior_bridge::bridges::verify::{gronwall_check, verify_pinning, GronwallSeries};
use prior_bridge::bridges::{BridgeSpec, Force};
use prior_bridge::cli;
use prior_bridge::config::RunConfig;
use prior_bridge::energies::{EnergyForce, EnergyKind, TermMask};
use prior_bridge::eval::{self, CloudMetric, SampleOptions};
use prior_bridge::geometry::{self, AtomTables, Vec3};
use prior_bridge::sde::{make_grid, NoiseSchedule, ScheduleKind};
use prior_bridge::{model, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Config(_) | Error::Domain(_) | Error::Parse { .. } | Error::Table(_)) => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tables_for(symbols: Option<Vec<String>>) -> PyResult<Option<AtomTables>> {
    match symbols {
        Some(s) if !s.is_empty() => AtomTables::builtin().select(&s).map(Some).map_err(py_err),
        _ => Ok(None),
    }
}

/// Points in 3D with optional per-point type indices.
#[pyclass(name = "PointSet", from_py_object)]
#[derive(Clone)]
struct PyPointSet {
    inner: geometry::MarkedPointSet,
}

#[pymethods]
impl PyPointSet {
    #[new]
    #[pyo3(signature = (coords, types=None, k=0))]
    fn new(coords: Vec<Vec3>, types: Option<Vec<usize>>, k: usize) -> PyResult<Self> {
        let inner = match types {
            Some(t) => geometry::MarkedPointSet::one_hot(coords, &t, k),
            None => geometry::MarkedPointSet::untyped(coords),
        }
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Reads an XYZ, PLY or whitespace-row file.
    #[staticmethod]
    #[pyo3(signature = (path, symbols=None))]
    fn read(path: PathBuf, symbols: Option<Vec<String>>) -> PyResult<Self> {
        let tables = tables_for(symbols)?;
        let inner = geometry::io::read_point_set(&path, tables.as_ref()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn coords(&self) -> Vec<Vec3> {
        self.inner.coords.clone()
    }

    /// Type indices, or `None` for an untyped cloud.
    #[getter]
    fn types(&self) -> PyResult<Option<Vec<usize>>> {
        if self.inner.is_typed() {
            self.inner.type_indices().map(Some).map_err(py_err)
        } else {
            Ok(None)
        }
    }

    fn centered(&self) -> Self {
        Self {
            inner: self.inner.centered(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointSet(points={}, type_channels={})", self.inner.len(), self.inner.k)
    }
}

/// Dataset statistics consumed by the statistical and knn energies.
#[pyclass(name = "Stats", from_py_object)]
#[derive(Clone)]
struct PyStats {
    inner: Arc<geometry::DatasetStats>,
}

#[pymethods]
impl PyStats {
    #[staticmethod]
    #[pyo3(signature = (sets, k=4, symbols=None))]
    fn extract(sets: Vec<PyPointSet>, k: usize, symbols: Option<Vec<String>>) -> PyResult<Self> {
        let tables = tables_for(symbols)?;
        let data: Vec<_> = sets.into_iter().map(|s| s.inner).collect();
        let inner = geometry::extract_stats(&data, k, tables.as_ref()).map_err(py_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = geometry::DatasetStats::load(&path).map_err(py_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

/// One of `amber`, `statistical`, `riesz`, `knn`.
#[pyclass(name = "Energy")]
struct PyEnergy {
    inner: Arc<EnergyForce>,
}

#[pymethods]
impl PyEnergy {
    #[new]
    #[pyo3(signature = (kind, stats=None, symbols=None, k=4, terms="all", clip=1000.0, weight=1.0))]
    fn new(
        kind: &str,
        stats: Option<PyStats>,
        symbols: Option<Vec<String>>,
        k: usize,
        terms: &str,
        clip: f64,
        weight: f64,
    ) -> PyResult<Self> {
        let kind: EnergyKind = kind.parse().map_err(py_err)?;
        let mask: TermMask = terms.parse().map_err(py_err)?;
        let tables = tables_for(symbols)?.map(Arc::new);
        let channels = tables.as_ref().map_or(0, |t| t.len());
        let inner = EnergyForce::new(kind, stats.map(|s| s.inner), tables, k, channels)
            .and_then(|f| f.with_mask(mask).with_clip(clip))
            .and_then(|f| f.with_weight(weight))
            .map_err(py_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    fn energy(&self, set: &PyPointSet) -> PyResult<f64> {
        self.inner.energy(&set.inner).map_err(py_err)
    }

    /// `(energy, gradient)` with the gradient as one row per point.
    fn energy_grad(&self, set: &PyPointSet) -> PyResult<(f64, Vec<Vec3>)> {
        self.inner.energy_grad(&set.inner).map_err(py_err)
    }

    #[pyo3(signature = (set, h=1e-5))]
    fn fd_gradient(&self, set: &PyPointSet, h: f64) -> PyResult<Vec<Vec3>> {
        self.inner.fd_gradient(&set.inner, h).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }
}

/// Mean terminal error per step count and the overall verdict.
#[pyfunction]
#[pyo3(signature = (pin, steps, paths=200, seed=0, schedule="constant:1", horizon=1.0, energy=None))]
fn pinning_check(
    pin: &PyPointSet,
    steps: Vec<usize>,
    paths: usize,
    seed: u64,
    schedule: &str,
    horizon: f64,
    energy: Option<&PyEnergy>,
) -> PyResult<(Vec<(usize, f64)>, bool)> {
    let schedule = ScheduleKind::parse(schedule)
        .and_then(|k| NoiseSchedule::new(k, horizon))
        .map_err(py_err)?;
    let state = pin.inner.centered().to_state(1.0);
    let spec = match energy {
        Some(e) => BridgeSpec::forced(state, schedule, e.inner.clone() as Arc<dyn Force>),
        None => BridgeSpec::brownian(state, schedule),
    }
    .map_err(py_err)?;
    let rep = verify_pinning(&spec, &steps, paths, seed).map_err(py_err)?;
    Ok((rep.levels.iter().map(|l| (l.steps, l.mean_error)).collect(), rep.pass))
}

/// Grönwall divergence check with `alpha_t = 1 / (T - t)` (`inverse`) or a
/// constant step size.
#[pyfunction]
#[pyo3(signature = (alpha="inverse", pl_beta=0.25, pl_gamma=0.25, steps=10000, horizon=1.0))]
fn gronwall(alpha: &str, pl_beta: f64, pl_gamma: f64, steps: usize, horizon: f64) -> PyResult<bool> {
    let alpha: Arc<dyn Fn(f64) -> f64 + Send + Sync> = match alpha {
        "inverse" => Arc::new(move |t| 1.0 / (horizon - t)),
        other => {
            let c: f64 = other
                .strip_prefix("constant:")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PyValueError::new_err("alpha must be inverse or constant:C"))?;
            Arc::new(move |_| c)
        }
    };
    let series = GronwallSeries {
        alpha,
        pl_beta: Arc::new(move |_| pl_beta),
        pl_gamma: Arc::new(move |_| pl_gamma),
        grid: make_grid(steps, horizon).map_err(py_err)?,
    };
    Ok(gronwall_check(&series).map_err(py_err)?.pass)
}

/// Trained drift model.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: model::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn m_points(&self) -> usize {
        self.inner.m_points
    }

    #[getter]
    fn symbols(&self) -> Vec<String> {
        self.inner.symbols.clone()
    }

    /// Drift `s(z, t)` on a flattened state.
    fn drift(&self, z: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
        let m = self.inner.model().map_err(py_err)?;
        let mut out = vec![0.0; z.len()];
        m.drift_eval(&z, t, &mut out).map_err(py_err)?;
        Ok(out)
    }

    #[pyo3(signature = (n, steps=100, seed=0, points=None))]
    fn sample(&self, n: usize, steps: usize, seed: u64, points: Option<usize>) -> PyResult<Vec<PyPointSet>> {
        let opts = SampleOptions {
            n_items: n,
            m_points: points.unwrap_or(self.inner.m_points),
            steps,
            seed,
            keep_trajectories: false,
        };
        let batch = eval::sample(&self.inner, opts).map_err(py_err)?;
        Ok(batch.items.into_iter().map(|inner| PyPointSet { inner }).collect())
    }
}

/// Trains a drift model. `settings` takes the same keys as the `train`
/// command (for example `{"epochs": "50", "optimizer": "adam"}`).
#[pyfunction]
#[pyo3(signature = (sets, energy="none", symbols=None, seed=0, settings=None))]
fn train(
    sets: Vec<PyPointSet>,
    energy: &str,
    symbols: Option<Vec<String>>,
    seed: u64,
    settings: Option<HashMap<String, String>>,
) -> PyResult<(PyCheckpoint, Vec<(usize, f64, f64)>)> {
    let mut c = RunConfig::with_defaults(cli::TRAIN_DEFAULTS);
    let mut pairs: Vec<String> = settings
        .unwrap_or_default()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    pairs.sort();
    c.apply_flags(&pairs).map_err(py_err)?;
    c.record("energy", energy).map_err(py_err)?;
    c.record("seed", seed).map_err(py_err)?;
    let tables = tables_for(symbols)?;
    let data: Vec<_> = sets.into_iter().map(|s| s.inner).collect();
    let force = cli::build_force(&c, &data, tables.as_ref(), None).map_err(py_err)?;
    let typed = data.first().is_some_and(|s| s.is_typed());
    let cfg = cli::train_config(&mut c, typed, force.is_some()).map_err(py_err)?;
    let mut run = model::train(&cfg, &data, force).map_err(py_err)?;
    if let Some(reason) = run.diverged {
        return Err(PyRuntimeError::new_err(format!("training diverged: {reason}")));
    }
    if let Some(t) = tables.filter(|_| typed) {
        run.checkpoint.symbols = t.symbols();
    }
    let log = run.log.iter().map(|l| (l.epoch, l.loss, l.alpha)).collect();
    Ok((PyCheckpoint { inner: run.checkpoint }, log))
}

fn coords(sets: Vec<PyPointSet>) -> Vec<Vec<Vec3>> {
    sets.into_iter().map(|s| s.inner.centered().coords).collect()
}

#[pyfunction]
fn chamfer(a: Vec<Vec3>, b: Vec<Vec3>) -> PyResult<f64> {
    eval::chamfer(&a, &b).map_err(py_err)
}

#[pyfunction]
fn emd(a: Vec<Vec3>, b: Vec<Vec3>) -> PyResult<f64> {
    eval::emd(&a, &b).map_err(py_err)
}

/// `(MMD, COV)` under `chamfer` or `emd`.
#[pyfunction]
#[pyo3(signature = (generated, reference, metric="chamfer"))]
fn mmd_cov(generated: Vec<PyPointSet>, reference: Vec<PyPointSet>, metric: &str) -> PyResult<(f64, f64)> {
    let metric = match metric {
        "chamfer" | "cd" => CloudMetric::Chamfer,
        "emd" => CloudMetric::Emd,
        other => return Err(PyValueError::new_err(format!("unknown metric {other:?}"))),
    };
    eval::mmd_cov(&coords(generated), &coords(reference), metric).map_err(py_err)
}

/// `(mean, variance)` of the per-point knn-dist.
#[pyfunction]
#[pyo3(signature = (cloud, k=4))]
fn uniformity(cloud: Vec<Vec3>, k: usize) -> PyResult<(f64, f64)> {
    eval::uniformity_stats(&cloud, k).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (n, radius=1.0, seed=0))]
fn sphere_cloud(n: usize, radius: f64, seed: u64) -> PyResult<PyPointSet> {
    let inner = geometry::synth::sphere_cloud(n, radius, seed).map_err(py_err)?;
    Ok(PyPointSet { inner })
}

#[pymodule]
fn priorbridge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointSet>()?;
    m.add_class::<PyStats>()?;
    m.add_class::<PyEnergy>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(pinning_check, m)?)?;
    m.add_function(wrap_pyfunction!(gronwall, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(mmd_cov, m)?)?;
    m.add_function(wrap_pyfunction!(uniformity, m)?)?;
    m.add_function(wrap_pyfunction!(sphere_cloud, m)?)?;
    Ok(())
}
