//! Python bindings: models, oracle data generation, prediction, relaxation
//! and the invariant checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spinconv::checks::run_suite;
use spinconv::data::{generate_dataset as generate, Dataset, GenerateConfig, OracleParams};
use spinconv::geometry::{AtomicSystem, Vec3};
use spinconv::model::{Model as CoreModel, ModelConfig};
use spinconv::relax::{relax as core_relax, RelaxConfig, RelaxError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn system(positions: Vec<Vec3>, numbers: Vec<u32>) -> PyResult<AtomicSystem> {
    AtomicSystem::new(positions, numbers).map_err(value_err)
}

/// Parses a JSON object of config fields; missing fields take defaults.
fn parse_config<T: serde::de::DeserializeOwned>(json: Option<&str>) -> PyResult<T> {
    serde_json::from_str(json.unwrap_or("{}")).map_err(value_err)
}

#[pyclass(name = "Model", module = "spinconv_py")]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// Fresh model from a JSON model config (all fields optional).
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: ModelConfig = parse_config(config_json)?;
        Ok(Self { inner: CoreModel::new(cfg).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreModel::load(&path).map_err(runtime_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(runtime_err)
    }

    fn config_json(&self) -> String {
        serde_json::to_string(self.inner.config()).expect("config serializes")
    }

    fn num_parameters(&self) -> usize {
        self.inner.params().num_scalars()
    }

    fn energy(&self, positions: Vec<Vec3>, numbers: Vec<u32>) -> PyResult<f64> {
        self.inner.energy(&system(positions, numbers)?).map_err(runtime_err)
    }

    /// Energy and forces by the model's variant; force-centric models draw
    /// their rotations from `seed`.
    #[pyo3(signature = (positions, numbers, seed=0))]
    fn predict(&self, positions: Vec<Vec3>, numbers: Vec<u32>, seed: u64) -> PyResult<(f64, Vec<Vec3>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.inner.predict(&system(positions, numbers)?, &mut rng).map_err(runtime_err)?;
        Ok((p.energy, p.forces))
    }

    /// Relaxes with model forces; returns final positions, steps taken and status.
    #[pyo3(signature = (positions, numbers, seed=0, relax_json=None))]
    fn relax(
        &self,
        positions: Vec<Vec3>,
        numbers: Vec<u32>,
        seed: u64,
        relax_json: Option<&str>,
    ) -> PyResult<(Vec<Vec3>, usize, String)> {
        let cfg: RelaxConfig = parse_config(relax_json)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = &self.inner;
        let mut provider =
            |s: &AtomicSystem| model.predict(s, &mut rng).map(|p| p.forces).map_err(|e| RelaxError::Provider(e.to_string()));
        let t = core_relax(&system(positions, numbers)?, &mut provider, &cfg).map_err(runtime_err)?;
        let status = serde_json::to_value(t.status).expect("status serializes");
        Ok((t.last().positions.clone(), t.steps(), status.as_str().unwrap_or_default().to_string()))
    }
}

/// Oracle energy (eV) and forces (eV/Å).
#[pyfunction]
#[pyo3(signature = (positions, numbers, oracle_json=None))]
fn oracle_energy_forces(positions: Vec<Vec3>, numbers: Vec<u32>, oracle_json: Option<&str>) -> PyResult<(f64, Vec<Vec3>)> {
    let oracle: OracleParams = parse_config(oracle_json)?;
    oracle.energy_forces(&system(positions, numbers)?).map_err(value_err)
}

/// Generates a labeled dataset and returns it as JSON lines; writes it to
/// `path` as well when given.
#[pyfunction]
#[pyo3(signature = (config_json=None, path=None))]
fn generate_dataset(config_json: Option<&str>, path: Option<PathBuf>) -> PyResult<String> {
    let cfg: GenerateConfig = parse_config(config_json)?;
    let ds = Dataset::new(generate(&cfg, &OracleParams::default()).map_err(value_err)?);
    if let Some(p) = path {
        ds.write(&p).map_err(runtime_err)?;
    }
    Ok(ds.to_jsonl())
}

/// Invariant suite on a fresh model: `(name, value, tolerance, passed)` per check.
#[pyfunction]
#[pyo3(signature = (config_json=None, seed=0))]
fn check(config_json: Option<&str>, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let cfg: ModelConfig = parse_config(config_json)?;
    let outcomes = run_suite(&cfg, seed).map_err(value_err)?;
    Ok(outcomes.into_iter().map(|o| (o.name, o.value, o.tolerance, o.passed)).collect())
}

#[pymodule]
fn spinconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(oracle_energy_forces, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    Ok(())
}
