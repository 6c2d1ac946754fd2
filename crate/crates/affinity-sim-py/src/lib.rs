//! Python bindings for the affinity-sim core: capacity solving, rate
//! estimation, and simulation runs. Everything returned to Python is plain
//! data (floats, lists, dicts), so results can go straight into numpy or
//! pandas.

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use affinity_sim::capacity;
use affinity_sim::error::Error;
use affinity_sim::estimation::{ExplorationSchedule, RateEstimates as CoreEstimates};
use affinity_sim::model::{build_locality_structure, RateMatrix};
use affinity_sim::report::{estimates_to_csv, results_to_csv};
use affinity_sim::scenario::{
    mislearning_spec, ArrivalsSection, EngineSection, EstimatesSection, ExplorationSection,
    MatrixSection, PolicySection, Scenario, ServicesSection,
};
use affinity_sim::sim::{run_replications, MetricsReport};
use affinity_sim::workloads::{DEFAULT_SIGMA, DEFAULT_S_MAX};

fn pyerr(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn worker_threads(threads: usize) -> usize {
    if threads > 0 {
        threads
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

fn report_to_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("policy", &r.policy)?;
    d.set_item("lambda_total", r.lambda_total)?;
    d.set_item("replication", r.replication)?;
    d.set_item("seed", r.seed)?;
    d.set_item("arrived", r.arrived)?;
    d.set_item("completed", r.completed)?;
    d.set_item("mean_completion_time", r.mean_completion_time)?;
    d.set_item("backlog_slope", r.backlog_slope)?;
    d.set_item("invariant_violations", r.invariant_violations)?;
    if let Some(est) = &r.final_estimates {
        d.set_item("estimates", est.values().to_vec())?;
    }
    Ok(d)
}

fn reports_to_list(py: Python<'_>, reports: &[MetricsReport]) -> PyResult<Vec<Py<PyDict>>> {
    reports.iter().map(|r| Ok(report_to_dict(py, r)?.unbind())).collect()
}

/// Largest total arrival rate lambda such that lambda * proportions still has
/// a feasible per-server decomposition.
#[pyfunction]
#[pyo3(signature = (rates, proportions, tol=1e-7))]
fn peak_throughput(rates: Vec<Vec<f64>>, proportions: Vec<f64>, tol: f64) -> PyResult<f64> {
    let b = RateMatrix::new(rates).map_err(pyerr)?;
    capacity::max_scalar_throughput(&b, &proportions, tol).map_err(pyerr)
}

/// Most balanced feasible split of per-type arrival rates across servers, or
/// None when the vector lies outside the capacity region. Returns a dict with
/// "lambda_im" (rows = types), "loads" (per server) and "max_load".
#[pyfunction]
#[pyo3(signature = (rates, lambdas, epsilon=1e-9))]
fn feasible_split(
    py: Python<'_>,
    rates: Vec<Vec<f64>>,
    lambdas: Vec<f64>,
    epsilon: f64,
) -> PyResult<Option<Py<PyDict>>> {
    let b = RateMatrix::new(rates).map_err(pyerr)?;
    match capacity::feasible_decomposition(&b, &lambdas, epsilon).map_err(pyerr)? {
        None => Ok(None),
        Some(dec) => {
            let loads = dec.per_server_load(&b);
            let d = PyDict::new_bound(py);
            d.set_item("lambda_im", dec.lambda_im)?;
            d.set_item("max_load", loads.iter().copied().fold(0.0f64, f64::max))?;
            d.set_item("loads", loads)?;
            Ok(Some(d.unbind()))
        }
    }
}

/// Locality structure of a rate matrix: per server, the distinct rates in
/// descending order ("level_rates") and the task types at each level
/// ("members", 0-based).
#[pyfunction]
fn locality(py: Python<'_>, rates: Vec<Vec<f64>>) -> PyResult<Vec<Py<PyDict>>> {
    let b = RateMatrix::new(rates).map_err(pyerr)?;
    let loc = build_locality_structure(&b);
    (0..loc.num_servers())
        .map(|m| {
            let d = PyDict::new_bound(py);
            let levels = 0..loc.num_levels(m);
            d.set_item(
                "level_rates",
                levels.clone().map(|n| loc.level_rate(m, n)).collect::<Vec<_>>(),
            )?;
            d.set_item(
                "members",
                levels.map(|n| loc.members(m, n).to_vec()).collect::<Vec<_>>(),
            )?;
            Ok(d.unbind())
        })
        .collect()
}

/// Probability of exploring at slot t under the decaying schedule
/// min(1, (t + t_offset - 1)^-c).
#[pyfunction]
#[pyo3(signature = (t, c=0.5, t_offset=1))]
fn exploration_probability(t: u64, c: f64, t_offset: u64) -> PyResult<f64> {
    Ok(ExplorationSchedule::new(c, t_offset).map_err(pyerr)?.probability(t))
}

/// Per-(server, level) service-rate estimates: the running mean of observed
/// rates 1/T, where the first observation replaces the initialization.
#[pyclass(name = "RateEstimates")]
struct PyRateEstimates {
    inner: CoreEstimates,
}

impl PyRateEstimates {
    fn check(&self, server: usize, level: usize) -> PyResult<()> {
        let values = self.inner.values();
        if server >= values.len() || level >= values[server].len() {
            return Err(PyIndexError::new_err(format!(
                "no estimate cell (server {server}, level {level})"
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl PyRateEstimates {
    /// Explicit initialization; values[m][n] is the starting estimate of
    /// server m's level-n rate.
    #[new]
    #[pyo3(signature = (values, counts=None))]
    fn new(values: Vec<Vec<f64>>, counts: Option<Vec<Vec<u64>>>) -> PyResult<Self> {
        Ok(Self { inner: CoreEstimates::with_values(values, counts).map_err(pyerr)? })
    }

    /// Uniform random initialization on [low, high) shaped to the locality
    /// structure of the given rate matrix.
    #[staticmethod]
    #[pyo3(signature = (rates, low=0.1, high=1.0, seed=0))]
    fn uniform(rates: Vec<Vec<f64>>, low: f64, high: f64, seed: u64) -> PyResult<Self> {
        let b = RateMatrix::new(rates).map_err(pyerr)?;
        let loc = build_locality_structure(&b);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { inner: CoreEstimates::init_uniform(&loc, low, high, &mut rng).map_err(pyerr)? })
    }

    /// Records one completed service of t_obs slots at cell (server, level).
    fn record(&mut self, server: usize, level: usize, t_obs: u64) -> PyResult<()> {
        self.check(server, level)?;
        self.inner.record_service(server, level, t_obs).map_err(pyerr)
    }

    fn estimate(&self, server: usize, level: usize) -> PyResult<f64> {
        self.check(server, level)?;
        Ok(self.inner.estimate(server, level))
    }

    fn count(&self, server: usize, level: usize) -> PyResult<u64> {
        self.check(server, level)?;
        Ok(self.inner.count(server, level))
    }

    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.values().to_vec()
    }
}

/// Runs one (policy, total arrival rate) cell and returns a dict per
/// replication. Identical arguments produce identical results.
#[pyfunction]
#[pyo3(signature = (
    rates, proportions, lambda_total, policy,
    horizon=200_000, warmup=20_000, replications=5, seed=0,
    services="geometric", sigma=DEFAULT_SIGMA, s_max=DEFAULT_S_MAX,
    arrivals="poisson", exponent=None, c=0.5, t_offset=1,
    init_low=0.1, init_high=1.0, invariant_checks=true, threads=0,
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    rates: Vec<Vec<f64>>,
    proportions: Vec<f64>,
    lambda_total: f64,
    policy: &str,
    horizon: u64,
    warmup: u64,
    replications: u32,
    seed: u64,
    services: &str,
    sigma: f64,
    s_max: u64,
    arrivals: &str,
    exponent: Option<f64>,
    c: f64,
    t_offset: u64,
    init_low: f64,
    init_high: f64,
    invariant_checks: bool,
    threads: usize,
) -> PyResult<Vec<Py<PyDict>>> {
    let scn = Scenario {
        matrix: MatrixSection { rates },
        arrivals: ArrivalsSection {
            kind: arrivals.to_string(),
            proportions,
            lambdas: vec![lambda_total],
            cap: None,
        },
        services: ServicesSection { kind: services.to_string(), sigma, s_max },
        engine: EngineSection { horizon, warmup, replications, seed, invariant_checks },
        exploration: ExplorationSection { c, t_offset },
        estimates: EstimatesSection { init_low, init_high },
        policies: vec![PolicySection { kind: policy.to_string(), exponent }],
    };
    scn.validate().map_err(pyerr)?;
    let kind = scn.policy_kinds().map_err(pyerr)?[0];
    let spec = scn.run_spec(kind, lambda_total).map_err(pyerr)?;
    let reports =
        run_replications(&spec, seed, replications, worker_threads(threads)).map_err(pyerr)?;
    reports_to_list(py, &reports)
}

/// The two-server mislearning setup: inverted initial beliefs, deterministic
/// arrivals and services. With explore=False the bad beliefs are absorbing;
/// with explore=True the fast cells get sampled and routing recovers.
#[pyfunction]
#[pyo3(signature = (lambda_per_type, explore, horizon=20_000, warmup=2_000, replications=3, seed=1, threads=0))]
fn mislearning(
    py: Python<'_>,
    lambda_per_type: f64,
    explore: bool,
    horizon: u64,
    warmup: u64,
    replications: u32,
    seed: u64,
    threads: usize,
) -> PyResult<Vec<Py<PyDict>>> {
    let spec = mislearning_spec(lambda_per_type, horizon, warmup, explore);
    let reports =
        run_replications(&spec, seed, replications, worker_threads(threads)).map_err(pyerr)?;
    reports_to_list(py, &reports)
}

/// Full sweep of a TOML scenario (the CLI `run` subcommand in-process).
/// Returns the (results, estimates) CSV strings; byte-identical for
/// identical configs.
#[pyfunction]
#[pyo3(signature = (text, threads=0))]
fn run_scenario_toml(text: &str, threads: usize) -> PyResult<(String, String)> {
    let scn = Scenario::from_toml_str(text).map_err(pyerr)?;
    scn.validate().map_err(pyerr)?;
    let loc = build_locality_structure(&scn.rate_matrix().map_err(pyerr)?);
    let workers = worker_threads(threads);
    let mut reports = Vec::new();
    for kind in scn.policy_kinds().map_err(pyerr)? {
        for &lambda in &scn.arrivals.lambdas {
            let spec = scn.run_spec(kind, lambda).map_err(pyerr)?;
            // One master seed for every cell: common random numbers across
            // policies and rates.
            reports.extend(
                run_replications(&spec, scn.engine.seed, scn.engine.replications, workers)
                    .map_err(pyerr)?,
            );
        }
    }
    Ok((results_to_csv(&reports), estimates_to_csv(&reports, &loc)))
}

#[pymodule]
fn affinity_sim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRateEstimates>()?;
    m.add_function(wrap_pyfunction!(peak_throughput, m)?)?;
    m.add_function(wrap_pyfunction!(feasible_split, m)?)?;
    m.add_function(wrap_pyfunction!(locality, m)?)?;
    m.add_function(wrap_pyfunction!(exploration_probability, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(mislearning, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario_toml, m)?)?;
    Ok(())
}
