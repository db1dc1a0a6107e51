//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coordprior::describe::TemplateSet;
use coordprior::env::{self, JointAction, ScenarioId, ScenarioSpec, WorldState};
use coordprior::gnn::{gnn_forward as core_gnn_forward, GnnConfig, GnnParams};
use coordprior::harness::{run_experiment as core_run_experiment, ExperimentConfig, TrainingRunner};
use coordprior::learn::{self, Checkpoint, Method, PriorMode, PriorSource, TrainConfig};
use coordprior::numeric::Matrix;
use coordprior::prior::{self, PriorClient, ProviderConfig};
use coordprior::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Checkpoint { .. } => PyIOError::new_err(e.to_string()),
        Error::Provider(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(py_err)
}

fn scenario_spec(name: &str, t_max: usize) -> PyResult<ScenarioSpec> {
    let id: ScenarioId = name.parse().map_err(py_err)?;
    let mut spec = ScenarioSpec::new(id);
    spec.t_max = t_max;
    spec.validate().map_err(py_err)?;
    Ok(spec)
}

fn provider_config(
    provider: &str,
    base_url: Option<String>,
    model: Option<String>,
    cache_dir: Option<PathBuf>,
    retries: Option<u32>,
) -> PyResult<ProviderConfig> {
    let mut cfg = ProviderConfig {
        kind: provider.parse().map_err(py_err)?,
        base_url,
        cache_dir,
        ..ProviderConfig::default()
    };
    if let Some(m) = model {
        cfg.model = m;
    }
    if let Some(r) = retries {
        cfg.retry_count = r;
    }
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// A scenario with its default team size and landmark count.
#[pyclass(name = "Scenario", frozen)]
struct PyScenario {
    spec: ScenarioSpec,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (name, t_max = 25))]
    fn new(name: &str, t_max: usize) -> PyResult<Self> {
        Ok(Self { spec: scenario_spec(name, t_max)? })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.spec.scenario.as_str()
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.spec.n_agents
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.spec.t_max
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    #[getter]
    fn obs_dims(&self) -> Vec<usize> {
        (0..self.spec.n_agents).map(|i| self.spec.obs_dim(i)).collect()
    }

    #[getter]
    fn action_counts(&self) -> Vec<usize> {
        (0..self.spec.n_agents).map(|i| self.spec.action_count(i)).collect()
    }

    #[getter]
    fn roles(&self) -> Vec<&'static str> {
        self.spec.roles().into_iter().map(|r| r.as_str()).collect()
    }

    /// One natural-language summary per agent at the reset state for `seed`.
    #[pyo3(signature = (seed = 0))]
    fn describe(&self, seed: u64) -> PyResult<Vec<String>> {
        let (_, obs) = env::reset(&self.spec, seed).map_err(py_err)?;
        let t = TemplateSet::default();
        obs.iter()
            .enumerate()
            .map(|(i, o)| t.describe(o, i, &self.spec).map(|s| s.text).map_err(py_err))
            .collect()
    }

    /// The prompt sent to the provider, as a dict with system, user and hash.
    #[pyo3(signature = (seed = 0))]
    fn prompt<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let (_, obs) = env::reset(&self.spec, seed).map_err(py_err)?;
        let b = prior::prompt_for_observations(&obs, &self.spec, &TemplateSet::default()).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("system", b.system)?;
        d.set_item("user", b.user)?;
        d.set_item("hash", b.hash)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Scenario('{}', n_agents={})", self.spec.scenario, self.spec.n_agents)
    }
}

/// Stepping interface over one scenario. Observations are per-agent lists.
#[pyclass(name = "Env", unsendable)]
struct PyEnv {
    spec: ScenarioSpec,
    state: Option<WorldState>,
}

#[pymethods]
impl PyEnv {
    #[new]
    fn new(scenario: &PyScenario) -> Self {
        Self { spec: scenario.spec.clone(), state: None }
    }

    fn reset(&mut self, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let (state, obs) = env::reset(&self.spec, seed).map_err(py_err)?;
        self.state = Some(state);
        Ok(obs.into_iter().map(|o| o.values).collect())
    }

    /// Returns `(observations, reward, done, terminated)`.
    fn step(&mut self, actions: Vec<usize>) -> PyResult<(Vec<Vec<f64>>, f64, bool, bool)> {
        let state = self.state.as_ref().ok_or_else(|| PyRuntimeError::new_err("call reset() first"))?;
        let r = env::step(&self.spec, state, &JointAction(actions)).map_err(py_err)?;
        let out = (r.observations.into_iter().map(|o| o.values).collect(), r.reward, r.done, r.terminated);
        self.state = Some(r.state);
        Ok(out)
    }

    fn global_state(&self) -> PyResult<Vec<f64>> {
        let state = self.state.as_ref().ok_or_else(|| PyRuntimeError::new_err("call reset() first"))?;
        Ok(env::global_state(&self.spec, state))
    }
}

/// Trained or freshly initialized learner parameters with their scenario.
#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(&path).map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (scenario, method, seed = 0))]
    fn fresh(scenario: &PyScenario, method: &str, seed: u64) -> PyResult<Self> {
        let cfg = TrainConfig::default();
        let method = Method::parse(method, cfg.prior_mode).map_err(py_err)?;
        Ok(Self { inner: Checkpoint::fresh(&scenario.spec, method, &cfg, seed).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.label()
    }

    #[getter]
    fn scenario(&self) -> &'static str {
        self.inner.spec.scenario.as_str()
    }

    /// Greedy returns over `episodes` paired evaluation episodes.
    #[pyo3(signature = (episodes = 100, seed = 0, provider = "mock_heuristic", base_url = None))]
    fn evaluate(&self, episodes: usize, seed: u64, provider: &str, base_url: Option<String>) -> PyResult<Vec<f64>> {
        let ck = &self.inner;
        let client = match ck.method.prior {
            PriorMode::Llm => Some(
                PriorClient::from_config(&provider_config(provider, base_url, None, None, None)?).map_err(py_err)?,
            ),
            _ => None,
        };
        let t = TemplateSet::default();
        let priors = PriorSource::new(ck.method.prior, client.as_ref(), &t).map_err(py_err)?;
        learn::evaluate_seeded(&ck.spec, &ck.arch, &ck.params, &priors, episodes, seed).map_err(py_err)
    }
}

/// Extract the first n x n matrix from free text.
#[pyfunction]
fn parse_adjacency(text: &str, n: usize) -> PyResult<Vec<Vec<f64>>> {
    prior::parse_adjacency(text, n)
        .map(|m| m.to_rows())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Symmetrize, row-normalize and add self-loops, returning every stage.
#[pyfunction]
fn postprocess<'py>(py: Python<'py>, raw: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let m = matrix(&raw)?;
    if m.rows() != m.cols() {
        return Err(PyValueError::new_err("adjacency must be square"));
    }
    let s = prior::postprocess_stages(&m);
    let d = PyDict::new(py);
    d.set_item("symmetrized", s.symmetrized.to_rows())?;
    d.set_item("normalized", s.normalized.to_rows())?;
    d.set_item("prior", s.prior.to_rows())?;
    d.set_item("degenerate_rows", s.degenerate_rows)?;
    Ok(d)
}

#[pyfunction]
fn symmetry_error(m: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(prior::symmetry_error(&matrix(&m)?))
}

/// Full prior pipeline for the reset state of `seed`.
#[pyfunction]
#[pyo3(signature = (scenario, seed = 0, provider = "mock_heuristic", base_url = None, model = None, cache_dir = None, retries = None))]
fn gen_prior<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    seed: u64,
    provider: &str,
    base_url: Option<String>,
    model: Option<String>,
    cache_dir: Option<PathBuf>,
    retries: Option<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = provider_config(provider, base_url, model, cache_dir, retries)?;
    let client = PriorClient::from_config(&cfg).map_err(py_err)?;
    let (_, obs) = env::reset(&scenario.spec, seed).map_err(py_err)?;
    let p = py.detach(|| prior::prior_for_episode(&obs, &scenario.spec, &client, &TemplateSet::default()));
    let d = PyDict::new(py);
    d.set_item("matrix", p.matrix.to_rows())?;
    d.set_item("fallback", p.provenance.fallback)?;
    d.set_item("raw_response", p.provenance.raw_text)?;
    d.set_item("prompt_hash", p.provenance.prompt_hash)?;
    d.set_item("provider_calls", client.provider_calls())?;
    Ok(d)
}

/// Graph-network embeddings for one graph with seeded weights.
#[pyfunction]
#[pyo3(signature = (obs, adjacency, hidden = 64, layers = 2, seed = 0))]
fn gnn_forward(
    obs: Vec<Vec<f64>>,
    adjacency: Vec<Vec<f64>>,
    hidden: usize,
    layers: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let obs = matrix(&obs)?;
    let adj = matrix(&adjacency)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = GnnParams::new(obs.cols(), GnnConfig { hidden, layers }, &mut rng).map_err(py_err)?;
    let (h, _) = core_gnn_forward(&obs, &adj, &params).map_err(py_err)?;
    Ok(h.to_rows())
}

/// Train one method on one scenario; returns the log rows and a checkpoint.
#[pyfunction]
#[pyo3(signature = (scenario, method = "qmix", seed = 0, steps = 10_000, eval_interval = 2_000, eval_episodes = 10, provider = "mock_heuristic", base_url = None))]
fn train<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    method: &str,
    seed: u64,
    steps: u64,
    eval_interval: u64,
    eval_episodes: usize,
    provider: &str,
    base_url: Option<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrainConfig {
        total_steps: steps,
        eval_interval,
        eval_episodes,
        ..TrainConfig::default()
    };
    let method = Method::parse(method, cfg.prior_mode).map_err(py_err)?;
    let client = match method.prior {
        PriorMode::Llm => Some(PriorClient::from_config(&provider_config(provider, base_url, None, None, None)?).map_err(py_err)?),
        _ => None,
    };
    let spec = scenario.spec.clone();
    let outcome = py
        .detach(|| learn::run_training(&spec, &cfg, method, client.as_ref(), &TemplateSet::default(), seed))
        .map_err(py_err)?;
    let rows = outcome
        .log
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("episode", r.episode)?;
            d.set_item("mean_eval_return", r.mean_eval_return)?;
            d.set_item("loss", r.loss)?;
            d.set_item("epsilon", r.epsilon)?;
            d.set_item("fallback_rate", r.fallback_rate)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let d = PyDict::new(py);
    d.set_item("log", rows)?;
    d.set_item("final_return", outcome.final_return())?;
    d.set_item("env_steps", outcome.env_steps)?;
    d.set_item("checkpoint", PyCheckpoint { inner: outcome.checkpoint(&spec) })?;
    Ok(d)
}

/// Uniform-random joint policy on the same start states as `Checkpoint.evaluate`.
#[pyfunction]
#[pyo3(signature = (scenario, episodes = 100, seed = 0))]
fn random_policy_returns(scenario: &PyScenario, episodes: usize, seed: u64) -> PyResult<Vec<f64>> {
    learn::random_policy_returns(&scenario.spec, episodes, seed).map_err(py_err)
}

/// Run an INI-configured experiment; returns one dict per (scenario, method).
#[pyfunction]
#[pyo3(signature = (config_path, jobs = 1))]
fn run_experiment<'py>(py: Python<'py>, config_path: PathBuf, jobs: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = ExperimentConfig::load(&config_path).map_err(py_err)?;
    let runner = TrainingRunner::from_config(&cfg).map_err(py_err)?;
    let table = py.detach(|| core_run_experiment(&cfg, &runner, jobs)).map_err(py_err)?;
    table
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("scenario", r.scenario.as_str())?;
            d.set_item("method", r.method.label())?;
            d.set_item("mean", r.mean)?;
            d.set_item("std", r.std)?;
            d.set_item("completed_seeds", r.completed.iter().map(|s| s.seed).collect::<Vec<_>>())?;
            d.set_item("failed_seeds", r.failed.iter().map(|(s, _)| *s).collect::<Vec<_>>())?;
            Ok(d)
        })
        .collect()
}

/// Probe a provider and report whether its answer parses.
#[pyfunction]
#[pyo3(signature = (provider = "mock_heuristic", base_url = None, model = None))]
fn validate_provider<'py>(
    py: Python<'py>,
    provider: &str,
    base_url: Option<String>,
    model: Option<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let client = PriorClient::from_config(&provider_config(provider, base_url, model, None, None)?).map_err(py_err)?;
    let r = py.detach(|| prior::validate_provider(&client));
    let d = PyDict::new(py);
    d.set_item("passed", r.passed)?;
    d.set_item("latency_ms", r.latency_ms)?;
    d.set_item("response_text", r.response_text)?;
    d.set_item("parse_error", r.parse_error)?;
    d.set_item("provider_error", r.provider_error)?;
    d.set_item("symmetry_error", r.symmetry_error)?;
    d.set_item("warnings", r.warnings)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "coordprior")]
fn coordprior_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(parse_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess, m)?)?;
    m.add_function(wrap_pyfunction!(symmetry_error, m)?)?;
    m.add_function(wrap_pyfunction!(gen_prior, m)?)?;
    m.add_function(wrap_pyfunction!(gnn_forward, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(random_policy_returns, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(validate_provider, m)?)?;
    Ok(())
}
