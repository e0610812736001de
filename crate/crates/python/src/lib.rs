//! Python bindings: configuration presets, full campaigns, and the building
//! blocks (sources, solver, grid posterior, design candidates, EKI, network).

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use activebed::bayes_grid::{self, NoiseModel, ParamGrid, ParamPosterior};
use activebed::bed_design::{self, Design, DesignConstraint};
use activebed::eki_indicator::{self, Ensemble};
use activebed::experiment::artifacts::write_artifacts;
use activebed::experiment::gradcheck::{check_gradients, GradCheckConfig};
use activebed::experiment::{run_campaign, CampaignConfig, Scenario};
use activebed::forward_models::{self, DiscrepancyNet, SourceParams};
use activebed::grid_pde::{self, GridSpec, SolverConfig, SourceField, StateField, VelocityModel};
use activebed::Error;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn scenario(tag: &str) -> PyResult<Scenario> {
    tag.parse().map_err(py_err)
}

/// Default configuration of a scenario as a JSON string.
#[pyfunction]
fn default_config(scenario_tag: &str) -> PyResult<String> {
    Ok(CampaignConfig::preset(scenario(scenario_tag)?).to_json())
}

/// Runs a campaign from a JSON configuration. Returns a summary dict and,
/// when `out_dir` is given, writes the usual tables there.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir=None))]
fn run<'py>(py: Python<'py>, config_json: &str, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = CampaignConfig::from_json(config_json).map_err(py_err)?;
    let result = py.detach(|| run_campaign(&cfg)).map_err(py_err)?;
    if let Some(dir) = &out_dir {
        write_artifacts(dir, &cfg, &result).map_err(py_err)?;
    }
    let d = PyDict::new(py);
    let designs: Vec<(f64, f64, f64)> = result
        .records
        .iter()
        .map(|r| (r.design.d_x, r.design.d_y, r.design.d_t))
        .collect();
    let measurements: Vec<f64> = result.records.iter().map(|r| r.measurement.value).collect();
    let maps: Vec<(f64, f64)> = result.records.iter().map(|r| r.map).collect();
    let accepted: Vec<Option<bool>> = result
        .records
        .iter()
        .map(|r| r.indicator.as_ref().map(|i| i.accept))
        .collect();
    d.set_item("designs", designs)?;
    d.set_item("measurements", measurements)?;
    d.set_item("maps", maps)?;
    d.set_item("accepted", accepted)?;
    d.set_item("final_params", result.final_params())?;
    if let Some(f) = &result.final_metrics {
        d.set_item("corrected_mse", f.corrected.mse)?;
        d.set_item("corrected_re", f.corrected.re)?;
        d.set_item("baseline_mse", f.baseline.mse)?;
        d.set_item("baseline_re", f.baseline.re)?;
    }
    if let Some(c) = &result.comparison {
        d.set_item("comparison_mse", (c.informative.mse, c.uninformative.mse, c.baseline.mse))?;
        d.set_item("kld_informative", c.informative_trajectory().to_vec())?;
        d.set_item("kld_uninformative", c.uninformative_trajectory().to_vec())?;
    }
    Ok(d)
}

/// Maximum relative error between adjoint and finite-difference gradients.
#[pyfunction]
#[pyo3(signature = (scenario_tag, draws=20))]
fn validate_gradients(py: Python<'_>, scenario_tag: &str, draws: usize) -> PyResult<f64> {
    let s = scenario(scenario_tag)?;
    let cfg = GradCheckConfig {
        draws,
        ..GradCheckConfig::default()
    };
    let report = py.detach(|| check_gradients(s, &cfg)).map_err(py_err)?;
    Ok(report.max_rel_error)
}

fn params(x: f64, y: f64, h: f64, s: f64) -> PyResult<SourceParams> {
    SourceParams::new(x, y, h, s).map_err(py_err)
}

#[pyfunction]
fn true_source(z: (f64, f64), theta: (f64, f64, f64, f64)) -> PyResult<f64> {
    Ok(forward_models::eval_true_source(z, &params(theta.0, theta.1, theta.2, theta.3)?))
}

#[pyfunction]
fn modeled_source(z: (f64, f64), theta: (f64, f64, f64, f64)) -> PyResult<f64> {
    Ok(forward_models::eval_modeled_source(z, &params(theta.0, theta.1, theta.2, theta.3)?))
}

/// Field (row-major, `iy·n + ix`) at each breakpoint after the first,
/// starting from zero, with the exponential source and velocity `c·t`.
#[pyfunction]
#[pyo3(signature = (n_points, theta, velocity_coefficient, breakpoints, z_min=-2.0, z_max=3.0))]
fn simulate(
    py: Python<'_>,
    n_points: usize,
    theta: (f64, f64, f64, f64),
    velocity_coefficient: f64,
    breakpoints: Vec<f64>,
    z_min: f64,
    z_max: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let grid = GridSpec::new(z_min, z_max, n_points).map_err(py_err)?;
    let p = params(theta.0, theta.1, theta.2, theta.3)?;
    let source = SourceField::sample(grid, |x, y| forward_models::eval_true_source((x, y), &p))
        .map_err(py_err)?;
    let states = py
        .detach(|| {
            grid_pde::simulate(
                &StateField::zeros(grid),
                &VelocityModel::linear(velocity_coefficient),
                &source,
                &SolverConfig::default(),
                &breakpoints,
            )
        })
        .map_err(py_err)?;
    Ok(states.into_iter().map(|s| s.values).collect())
}

/// Bilinear observation of a row-major field at `location`.
#[pyfunction]
#[pyo3(signature = (values, location, z_min=-2.0, z_max=3.0))]
fn observe(values: Vec<f64>, location: (f64, f64), z_min: f64, z_max: f64) -> PyResult<f64> {
    let n = (values.len() as f64).sqrt().round() as usize;
    let grid = GridSpec::new(z_min, z_max, n).map_err(py_err)?;
    let state = StateField::new(grid, values, 0.0).map_err(py_err)?;
    grid_pde::observe(&state, location).map_err(py_err)
}

/// Candidate designs around `prev` (`n × n` lattice, clipped, deduplicated).
#[pyfunction]
#[pyo3(signature = (prev, n_per_axis=5))]
fn candidates(prev: (f64, f64, f64), n_per_axis: usize) -> Vec<(f64, f64, f64)> {
    bed_design::candidates(
        &Design::new(prev.0, prev.1, prev.2),
        &DesignConstraint::default(),
        n_per_axis,
    )
    .into_iter()
    .map(|d| (d.d_x, d.d_y, d.d_t))
    .collect()
}

/// Discrete location posterior on an `n × n` grid over `[lo, hi]^2`.
#[pyclass(name = "Posterior")]
#[derive(Clone)]
struct PyPosterior {
    inner: ParamPosterior,
}

#[pymethods]
impl PyPosterior {
    #[staticmethod]
    #[pyo3(signature = (n=51, lo=0.0, hi=1.0))]
    fn uniform(n: usize, lo: f64, hi: f64) -> PyResult<Self> {
        let grid = ParamGrid::uniform(lo, hi, n).map_err(py_err)?;
        Ok(Self {
            inner: ParamPosterior::uniform(grid),
        })
    }

    fn mass(&self) -> Vec<f64> {
        self.inner.mass().to_vec()
    }

    fn nodes(&self) -> Vec<(f64, f64)> {
        self.inner.grid().nodes().collect()
    }

    /// Bayes update with measurement `y`, node predictions and noise `sigma`.
    fn update(&self, y: f64, predictions: Vec<f64>, sigma: f64) -> PyResult<Self> {
        let noise = NoiseModel::new(sigma).map_err(py_err)?;
        let up = bayes_grid::bayes_update_with_predictions(&self.inner, y, &predictions, &noise)
            .map_err(py_err)?;
        Ok(Self {
            inner: up.posterior,
        })
    }

    fn map(&self) -> (f64, f64) {
        bayes_grid::map_estimate(&self.inner).1
    }

    fn top_m_mean(&self, m: usize) -> PyResult<(f64, f64)> {
        bayes_grid::top_m_mean(&self.inner, m).map_err(py_err)
    }

    /// `D(self ‖ other)` in nats.
    fn kld(&self, other: &PyPosterior) -> PyResult<f64> {
        bayes_grid::kld_grid(&self.inner, &other.inner).map_err(py_err)
    }
}

/// The 4-6-1 tanh correction network.
#[pyclass(name = "DiscrepancyNet")]
#[derive(Clone)]
struct PyNet {
    inner: DiscrepancyNet,
}

#[pymethods]
impl PyNet {
    #[staticmethod]
    #[pyo3(signature = (seed, gain=100.0, init_range=0.1))]
    fn random(seed: u64, gain: f64, init_range: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            inner: DiscrepancyNet::random(gain, init_range, &mut rng),
        }
    }

    #[new]
    #[pyo3(signature = (params, gain=100.0))]
    fn new(params: Vec<f64>, gain: f64) -> PyResult<Self> {
        Ok(Self {
            inner: DiscrepancyNet::new(params, gain).map_err(py_err)?,
        })
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    /// Raw output for input `(z_x, z_y, θ_x, θ_y)`.
    fn forward(&self, input: [f64; 4]) -> f64 {
        self.inner.forward(input)
    }

    /// Gain-scaled correction.
    fn correction(&self, input: [f64; 4]) -> f64 {
        self.inner.correction(input)
    }

    fn param_gradient(&self, input: [f64; 4]) -> Vec<f64> {
        self.inner.param_gradient(input).to_vec()
    }
}

fn ensemble(members: Vec<Vec<f64>>) -> PyResult<Ensemble> {
    Ensemble::from_members(&members).map_err(py_err)
}

/// One EKI step for a linear forward map `g(θ) = Gθ` with noise variance
/// `gamma` on each output.
#[pyfunction]
fn eki_step_linear(
    members: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    y: Vec<f64>,
    gamma: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let ens = ensemble(members)?;
    let rows = g.len();
    let cols = ens.dim();
    if g.iter().any(|r| r.len() != cols) || rows != y.len() {
        return Err(PyValueError::new_err("G must be len(y) × dim"));
    }
    let gm = DMatrix::from_fn(rows, cols, |i, j| g[i][j]);
    let forward = |p: &[f64]| -> activebed::Result<Vec<f64>> {
        Ok((&gm * DVector::from_column_slice(p)).iter().copied().collect())
    };
    let gamma = DMatrix::identity(rows, rows) * gamma;
    let next = eki_indicator::eki_step(&ens, &forward, &y, &gamma).map_err(py_err)?;
    Ok((0..next.size()).map(|j| next.member(j)).collect())
}

/// Divergence between Gaussian fits of two ensembles.
#[pyfunction]
#[pyo3(signature = (updated, initial, eps=1e-8))]
fn ensemble_kld(updated: Vec<Vec<f64>>, initial: Vec<Vec<f64>>, eps: f64) -> PyResult<f64> {
    eki_indicator::ensemble_kld(&ensemble(updated)?, &ensemble(initial)?, eps).map_err(py_err)
}

#[pymodule]
fn activebed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(validate_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(true_source, m)?)?;
    m.add_function(wrap_pyfunction!(modeled_source, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(observe, m)?)?;
    m.add_function(wrap_pyfunction!(candidates, m)?)?;
    m.add_function(wrap_pyfunction!(eki_step_linear, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_kld, m)?)?;
    m.add_class::<PyPosterior>()?;
    m.add_class::<PyNet>()?;
    Ok(())
}
