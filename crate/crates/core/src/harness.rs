//! Experiment configuration, multi-seed orchestration and results tables.
//!
//! The config is a flat `key = value` file split into `[experiment]`,
//! `[train]`, `[env]` and `[provider]` sections. Lines starting with `#` or
//! `;` are comments. Unknown sections and keys are rejected with their line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::describe::TemplateSet;
use crate::env::{ScenarioId, ScenarioSpec};
use crate::error::{Error, Result};
use crate::learn::{run_training, Method, TrainConfig, TrainingLog};
use crate::prior::{PriorClient, ProviderConfig, ProviderKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenarios: Vec<ScenarioId>,
    pub methods: Vec<Method>,
    /// Seeds live in `train.seeds`.
    pub train: TrainConfig,
    pub provider: ProviderConfig,
    pub output_dir: PathBuf,
    pub template_dir: Option<PathBuf>,
    /// Episode length override applied to every scenario.
    pub t_max: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![ScenarioId::SpeakerListener],
            methods: vec![Method::baseline(crate::learn::Algorithm::Qmix)],
            train: TrainConfig::default(),
            provider: ProviderConfig::default(),
            output_dir: PathBuf::from("results"),
            template_dir: None,
            t_max: 25,
        }
    }
}

fn list<T>(value: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect()
}

fn num<T: std::str::FromStr>(value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Invalid(format!("'{value}' is not a valid number: {e}")))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

const SECTIONS: [&str; 4] = ["experiment", "train", "env", "provider"];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.methods.is_empty() {
            return Err(Error::Invalid("scenarios and methods must be non-empty".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Invalid(format!("method {m} is listed twice")));
            }
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            if self.scenarios[..i].contains(s) {
                return Err(Error::Invalid(format!("scenario {s} is listed twice")));
            }
        }
        self.train.validate()?;
        self.provider.validate()?;
        for &s in &self.scenarios {
            self.spec(s).validate()?;
        }
        Ok(())
    }

    pub fn spec(&self, scenario: ScenarioId) -> ScenarioSpec {
        let mut spec = ScenarioSpec::new(scenario);
        spec.t_max = self.t_max;
        spec
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut method_tokens: Option<(usize, Vec<String>)> = None;
        let mut section: Option<&str> = None;
        let mut seen: Vec<(String, String)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let at = |e: Error| Error::Config {
                line: line_no,
                message: match e {
                    Error::Invalid(m) | Error::Usage(m) => m,
                    other => other.to_string(),
                },
            };
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                section = Some(SECTIONS.iter().copied().find(|s| *s == name).ok_or_else(|| {
                    at(Error::Invalid(format!("unknown section [{name}]")))
                })?);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at(Error::Invalid(format!("expected 'key = value', found '{line}'"))))?;
            let sec = section.ok_or_else(|| at(Error::Invalid(format!("key '{key}' appears before any section"))))?;
            if seen.iter().any(|(s, k)| s == sec && k == key) {
                return Err(at(Error::Invalid(format!("duplicate key '{key}' in [{sec}]"))));
            }
            seen.push((sec.to_string(), key.to_string()));
            let t = &mut cfg.train;
            let p = &mut cfg.provider;
            let result: Result<()> = match (sec, key) {
                ("experiment", "scenarios") => list(value, |s| s.parse()).map(|v| cfg.scenarios = v),
                ("experiment", "methods") => {
                    method_tokens = Some((line_no, list(value, |s| Ok(s.to_string()))?));
                    Ok(())
                }
                ("experiment", "seeds") => list(value, num::<u64>).map(|v| t.seeds = v),
                ("experiment", "output_dir") => {
                    cfg.output_dir = PathBuf::from(value);
                    Ok(())
                }
                ("experiment", "template_dir") => {
                    cfg.template_dir = (!value.is_empty()).then(|| PathBuf::from(value));
                    Ok(())
                }
                ("train", "total_steps") => num(value).map(|v| t.total_steps = v),
                ("train", "buffer_capacity") => num(value).map(|v| t.buffer_capacity = v),
                ("train", "batch_size") => num(value).map(|v| t.batch_size = v),
                ("train", "lr") => num(value).map(|v| t.lr = v),
                ("train", "gamma") => num(value).map(|v| t.gamma = v),
                ("train", "epsilon_start") => num(value).map(|v| t.epsilon_start = v),
                ("train", "epsilon_end") => num(value).map(|v| t.epsilon_end = v),
                ("train", "epsilon_anneal_steps") => num(value).map(|v| t.epsilon_anneal_steps = v),
                ("train", "target_update_interval") => num(value).map(|v| t.target_update_interval = v),
                ("train", "eval_interval") => num(value).map(|v| t.eval_interval = v),
                ("train", "eval_episodes") => num(value).map(|v| t.eval_episodes = v),
                ("train", "prior_mode") => value.parse().map(|v| t.prior_mode = v),
                ("train", "gnn_hidden") => num(value).map(|v| t.gnn.hidden = v),
                ("train", "gnn_layers") => num(value).map(|v| t.gnn.layers = v),
                ("train", "agent_hidden") => num(value).map(|v| t.agent_hidden = v),
                ("train", "mixer_hidden") => num(value).map(|v| t.mixer_hidden = v),
                ("train", "grad_clip") => num(value).map(|v| t.grad_clip = v),
                ("env", "t_max") => num(value).map(|v| cfg.t_max = v),
                ("provider", "kind") => value.parse::<ProviderKind>().map(|v| p.kind = v),
                ("provider", "base_url") => {
                    p.base_url = (!value.is_empty()).then(|| value.to_string());
                    Ok(())
                }
                ("provider", "model") => {
                    p.model = value.to_string();
                    Ok(())
                }
                ("provider", "temperature") => num(value).map(|v| p.temperature = v),
                ("provider", "max_tokens") => num(value).map(|v| p.max_tokens = v),
                ("provider", "timeout_secs") => num(value).map(|v| p.timeout_secs = v),
                ("provider", "retry_count") => num(value).map(|v| p.retry_count = v),
                ("provider", "cache_dir") => {
                    p.cache_dir = (!value.is_empty()).then(|| PathBuf::from(value));
                    Ok(())
                }
                _ => Err(Error::Invalid(format!("unknown key '{key}' in [{sec}]"))),
            };
            result.map_err(at)?;
        }
        // `ours` resolves against the prior mode, which may appear later in the file
        if let Some((line, tokens)) = method_tokens {
            cfg.methods = tokens
                .iter()
                .map(|m| Method::parse(m, cfg.train.prior_mode))
                .collect::<Result<_>>()
                .map_err(|e| Error::Config {
                    line,
                    message: e.to_string(),
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text: every section and key in fixed order, defaults made explicit.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let p = &self.provider;
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            if k.starts_with('[') {
                if !out.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "{k}");
            } else {
                let _ = writeln!(out, "{k} = {v}");
            }
        };
        put("[experiment]", &"");
        put("scenarios", &join(&self.scenarios));
        put("methods", &join(&self.methods));
        put("seeds", &join(&t.seeds));
        put("output_dir", &self.output_dir.display());
        if let Some(d) = &self.template_dir {
            put("template_dir", &d.display());
        }
        put("[train]", &"");
        put("total_steps", &t.total_steps);
        put("buffer_capacity", &t.buffer_capacity);
        put("batch_size", &t.batch_size);
        put("lr", &t.lr);
        put("gamma", &t.gamma);
        put("epsilon_start", &t.epsilon_start);
        put("epsilon_end", &t.epsilon_end);
        put("epsilon_anneal_steps", &t.epsilon_anneal_steps);
        put("target_update_interval", &t.target_update_interval);
        put("eval_interval", &t.eval_interval);
        put("eval_episodes", &t.eval_episodes);
        put("prior_mode", &t.prior_mode);
        put("gnn_hidden", &t.gnn.hidden);
        put("gnn_layers", &t.gnn.layers);
        put("agent_hidden", &t.agent_hidden);
        put("mixer_hidden", &t.mixer_hidden);
        put("grad_clip", &t.grad_clip);
        put("[env]", &"");
        put("t_max", &self.t_max);
        put("[provider]", &"");
        put("kind", &p.kind);
        if let Some(u) = &p.base_url {
            put("base_url", u);
        }
        put("model", &p.model);
        put("temperature", &p.temperature);
        put("max_tokens", &p.max_tokens);
        put("timeout_secs", &p.timeout_secs);
        put("retry_count", &p.retry_count);
        if let Some(d) = &p.cache_dir {
            put("cache_dir", &d.display());
        }
        out
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub final_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario: ScenarioId,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    pub completed: Vec<SeedResult>,
    /// Seeds that errored, with the error text; excluded from the statistics.
    pub failed: Vec<(u64, String)>,
}

impl ResultRow {
    pub fn seed_count(&self) -> usize {
        self.completed.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

pub const RESULTS_HEADER: &str = "scenario,method,mean_final_return,std_final_return,completed_seeds,failed_seeds";

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            let failed: Vec<String> = r.failed.iter().map(|(s, _)| s.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.scenario,
                r.method,
                r.mean,
                r.std,
                r.seed_count(),
                failed.join(";")
            );
        }
        out
    }

    /// Human-readable table in the layout of a paper results table.
    pub fn to_text(&self) -> String {
        let mut out = String::from("Final greedy return, mean ± population std across completed seeds\n\n");
        let _ = writeln!(out, "{:<18} {:<16} {:>22} {:>6}", "scenario", "method", "return", "seeds");
        for r in &self.rows {
            let value = format!("{:.3} ± {:.3}", r.mean, r.std);
            let mut seeds = r.seed_count().to_string();
            if !r.failed.is_empty() {
                seeds.push_str(&format!(" ({} failed)", r.failed.len()));
            }
            let _ = writeln!(out, "{:<18} {:<16} {:>22} {:>6}", r.scenario.as_str(), r.method.label(), value, seeds);
        }
        out
    }

    pub fn row(&self, scenario: ScenarioId, method: &Method) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.scenario == scenario && &r.method == method)
    }
}

/// Runs one (scenario, method, seed) training job.
pub trait SeedRunner: Sync {
    fn run(&self, spec: &ScenarioSpec, method: Method, seed: u64) -> Result<TrainingLog>;
}

/// The real trainer, sharing one prior client (and its caches) across jobs.
pub struct TrainingRunner {
    pub train: TrainConfig,
    pub client: PriorClient,
    pub templates: TemplateSet,
}

impl TrainingRunner {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let templates = match &cfg.template_dir {
            Some(d) => TemplateSet::from_dir(d)?,
            None => TemplateSet::default(),
        };
        Ok(Self {
            train: cfg.train.clone(),
            client: PriorClient::from_config(&cfg.provider)?,
            templates,
        })
    }
}

impl SeedRunner for TrainingRunner {
    fn run(&self, spec: &ScenarioSpec, method: Method, seed: u64) -> Result<TrainingLog> {
        run_training(spec, &self.train, method, Some(&self.client), &self.templates, seed).map(|o| o.log)
    }
}

pub fn run_dir(root: &Path, scenario: ScenarioId, method: &Method, seed: u64) -> PathBuf {
    root.join(scenario.as_str())
        .join(method.label())
        .join(format!("seed_{seed}"))
}

/// Every (scenario, method, seed) combination in config order, spread over
/// `jobs` worker threads. Each run writes its own log; failed seeds are kept
/// out of the statistics and listed in the table.
pub fn run_experiment(cfg: &ExperimentConfig, runner: &dyn SeedRunner, jobs: usize) -> Result<ResultsTable> {
    cfg.validate()?;
    let mut work = Vec::new();
    for &scenario in &cfg.scenarios {
        for method in &cfg.methods {
            for &seed in &cfg.train.seeds {
                work.push((scenario, *method, seed));
            }
        }
    }
    let slots: Vec<Mutex<Option<Result<f64, String>>>> = work.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(scenario, method, seed)) = work.get(k) else {
            break;
        };
        let outcome = run_one(cfg, runner, scenario, method, seed);
        if let Err(e) = &outcome {
            log::error!("{scenario} {method} seed {seed} failed: {e}");
        }
        *slots[k].lock().expect("result slot") = Some(outcome.map_err(|e| e.to_string()));
    };
    let jobs = jobs.clamp(1, work.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }

    let mut table = ResultsTable::default();
    let mut k = 0;
    for &scenario in &cfg.scenarios {
        for method in &cfg.methods {
            let mut completed = Vec::new();
            let mut failed = Vec::new();
            for &seed in &cfg.train.seeds {
                let slot = slots[k].lock().expect("result slot").take();
                k += 1;
                match slot {
                    Some(Ok(v)) => completed.push(SeedResult { seed, final_return: v }),
                    Some(Err(e)) => failed.push((seed, e)),
                    None => failed.push((seed, "not run".to_string())),
                }
            }
            let values: Vec<f64> = completed.iter().map(|c| c.final_return).collect();
            let (mean, std) = mean_std(&values);
            table.rows.push(ResultRow {
                scenario,
                method: *method,
                mean,
                std,
                completed,
                failed,
            });
        }
    }
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join("results.csv");
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = out.join("results.txt");
    fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))?;
    let used = out.join("config.ini");
    fs::write(&used, cfg.serialize()).map_err(|e| Error::io(&used, e))?;
    Ok(table)
}

fn run_one(cfg: &ExperimentConfig, runner: &dyn SeedRunner, scenario: ScenarioId, method: Method, seed: u64) -> Result<f64> {
    let dir = run_dir(&cfg.output_dir, scenario, &method, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let log = runner.run(&cfg.spec(scenario), method, seed)?;
    log.write_csv(&dir.join("log.csv"))?;
    log.final_return()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Invalid("run produced no finite evaluation".into()))
}
