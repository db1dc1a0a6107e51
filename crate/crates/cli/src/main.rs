//! `coordprior` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use coordprior::describe::TemplateSet;
use coordprior::env::{self, ScenarioId, ScenarioSpec};
use coordprior::error::Error;
use coordprior::harness::{run_experiment, ExperimentConfig, TrainingRunner};
use coordprior::learn::{
    evaluate_seeded, mean, random_policy_returns, run_training, Checkpoint, Method, PriorMode, PriorSource,
};
use coordprior::prior::{prior_for_episode, prompt_for_observations, validate_provider, PriorClient, ProviderConfig};

/// Environment variable that supplies the provider base URL when no flag does.
const URL_ENV: &str = "PRIOR_PROVIDER_URL";

#[derive(Parser)]
#[command(name = "coordprior", version, about = "Language-model coordination priors for cooperative multi-agent RL")]
struct Cli {
    /// Log filter for stderr (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the natural-language summary of every agent's reset observation.
    Describe(DescribeArgs),
    /// Build the prompt for a reset state, query the provider and print the prior.
    GenPrior(GenPriorArgs),
    /// Train one method on one scenario with one seed.
    Train(TrainArgs),
    /// Greedy evaluation of a saved checkpoint.
    Eval(EvalArgs),
    /// Run every scenario x method x seed from a config file and tabulate results.
    Experiment(ExperimentArgs),
    /// Send a fixed probe prompt and check the provider's answer.
    ValidateProvider(ValidateArgs),
}

#[derive(Args, Default)]
struct ProviderArgs {
    /// Provider kind: http_chat, mock_uniform or mock_heuristic.
    #[arg(long)]
    provider: Option<String>,
    /// Base URL of a chat-completions server (overrides PRIOR_PROVIDER_URL).
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Extra attempts after a failed request.
    #[arg(long)]
    retries: Option<u32>,
    /// Directory for cached provider responses.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl ProviderArgs {
    /// Config file values, then the environment URL, then explicit flags.
    fn apply(&self, mut cfg: ProviderConfig) -> Result<ProviderConfig, Error> {
        if let Ok(url) = std::env::var(URL_ENV) {
            if !url.is_empty() {
                cfg.base_url = Some(url);
            }
        }
        if let Some(k) = &self.provider {
            cfg.kind = k.parse().map_err(|e: Error| Error::Usage(e.to_string()))?;
        }
        if let Some(u) = &self.base_url {
            cfg.base_url = Some(u.clone());
        }
        if let Some(m) = &self.model {
            cfg.model = m.clone();
        }
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        if let Some(t) = self.max_tokens {
            cfg.max_tokens = t;
        }
        if let Some(t) = self.timeout {
            cfg.timeout_secs = t;
        }
        if let Some(r) = self.retries {
            cfg.retry_count = r;
        }
        if let Some(d) = &self.cache_dir {
            cfg.cache_dir = Some(d.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    scenario: ScenarioId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory of `<scenario>.txt` template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenPriorArgs {
    #[arg(long)]
    scenario: ScenarioId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Print the prompt only; the provider is never contacted.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "speaker_listener")]
    scenario: ScenarioId,
    /// iql, vdn, qmix, ours, ours-uniform, ours-heuristic or ours-llm.
    #[arg(long, default_value = "qmix")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Experiment config whose [train], [env] and [provider] sections apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the total number of environment steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory for log.csv and checkpoint.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Greedy,
    Random,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `random` ignores the checkpoint's parameters and acts uniformly at random.
    #[arg(long, value_enum, default_value = "greedy")]
    policy: Policy,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Parallel seed workers.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    provider: ProviderArgs,
}

/// An error plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Usage(_) | Error::Config { .. } | Error::Invalid(_) | Error::Checkpoint { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn config_error(e: Error) -> Failure {
    Failure {
        code: 2,
        message: e.to_string(),
    }
}

fn templates(dir: &Option<PathBuf>) -> Result<TemplateSet, Failure> {
    match dir {
        Some(d) => TemplateSet::from_dir(d).map_err(config_error),
        None => Ok(TemplateSet::default()),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values serialize"));
}

fn describe(args: DescribeArgs) -> CliResult {
    let spec = ScenarioSpec::new(args.scenario);
    let t = templates(&args.templates)?;
    let (_, obs) = env::reset(&spec, args.seed)?;
    let summaries = obs
        .iter()
        .enumerate()
        .map(|(i, o)| t.describe(o, i, &spec))
        .collect::<Result<Vec<_>, _>>()?;
    if args.json {
        print_json(&json!({ "scenario": spec.scenario, "seed": args.seed, "summaries": summaries }));
    } else {
        for s in &summaries {
            println!("Agent {}: {}", s.agent, s.text);
        }
    }
    Ok(())
}

fn gen_prior(args: GenPriorArgs) -> CliResult {
    let spec = ScenarioSpec::new(args.scenario);
    let t = templates(&args.templates)?;
    let provider_cfg = args.provider.apply(ProviderConfig::default()).map_err(config_error)?;
    let (_, obs) = env::reset(&spec, args.seed)?;
    let bundle = prompt_for_observations(&obs, &spec, &t)?;
    let prompt = json!({ "system": bundle.system, "user": bundle.user, "hash": bundle.hash });
    if args.dry_run {
        if args.json {
            print_json(&json!({ "scenario": spec.scenario, "seed": args.seed, "prompt": prompt, "provider_calls": 0 }));
        } else {
            println!("{}\n\n{}", bundle.system, bundle.user);
        }
        return Ok(());
    }
    let client = PriorClient::from_config(&provider_cfg).map_err(config_error)?;
    let prior = prior_for_episode(&obs, &spec, &client, &t);
    let p = &prior.provenance;
    if args.json {
        print_json(&json!({
            "scenario": spec.scenario,
            "seed": args.seed,
            "matrix": prior.matrix.to_rows(),
            "prompt": prompt,
            "raw_response": p.raw_text,
            "provider": p.provider,
            "model": p.model,
            "fallback": p.fallback,
            "provider_calls": client.provider_calls(),
        }));
    } else {
        println!("prompt hash: {}", bundle.hash);
        println!("provider: {} ({})", p.provider, p.model);
        if p.fallback {
            println!("fallback: yes, the uniform prior was used");
        }
        println!("raw response: {}", p.raw_text.as_deref().unwrap_or("<none>"));
        println!("prior:");
        for row in prior.matrix.to_rows() {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:.4}")).collect();
            println!("  [{}]", cells.join(", "));
        }
    }
    Ok(())
}

fn train(args: TrainArgs) -> CliResult {
    let mut exp = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(config_error)?,
        None => ExperimentConfig::default(),
    };
    if let Some(steps) = args.steps {
        exp.train.total_steps = steps;
        exp.train.eval_interval = exp.train.eval_interval.min(steps.max(1));
    }
    exp.train.seeds = vec![args.seed];
    exp.provider = args.provider.apply(exp.provider).map_err(config_error)?;
    let method = Method::parse(&args.method, exp.train.prior_mode)?;
    let spec = exp.spec(args.scenario);
    let t = templates(&exp.template_dir)?;
    let client = match method.prior {
        PriorMode::Llm => Some(PriorClient::from_config(&exp.provider).map_err(config_error)?),
        _ => None,
    };
    let out_dir = args.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs")
            .join(spec.scenario.as_str())
            .join(method.label())
            .join(format!("seed_{}", args.seed))
    });
    let outcome = run_training(&spec, &exp.train, method, client.as_ref(), &t, args.seed)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let log_path = out_dir.join("log.csv");
    outcome.log.write_csv(&log_path)?;
    let ck_path = out_dir.join("checkpoint.txt");
    outcome.checkpoint(&spec).save(&ck_path)?;
    let calls = client.as_ref().map_or(0, PriorClient::provider_calls);
    if args.json {
        print_json(&json!({
            "scenario": spec.scenario,
            "method": method.label(),
            "seed": args.seed,
            "env_steps": outcome.env_steps,
            "episodes": outcome.episodes,
            "final_return": outcome.final_return(),
            "fallback_episodes": outcome.fallback_episodes,
            "provider_calls": calls,
            "log": log_path,
            "checkpoint": ck_path,
        }));
    } else {
        println!(
            "{} {} seed {}: {} steps, {} episodes, final greedy return {:.3}",
            spec.scenario,
            method,
            args.seed,
            outcome.env_steps,
            outcome.episodes,
            outcome.final_return()
        );
        println!("log: {}", log_path.display());
        println!("checkpoint: {}", ck_path.display());
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(Failure {
            code: 2,
            message: format!("checkpoint {} does not exist", path.display()),
        });
    }
    Checkpoint::load(path).map_err(config_error)
}

fn eval(args: EvalArgs) -> CliResult {
    if args.episodes == 0 {
        return Err(Error::Usage("--episodes must be positive".into()).into());
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let t = templates(&args.templates)?;
    let returns = match args.policy {
        Policy::Random => random_policy_returns(&ck.spec, args.episodes, args.seed)?,
        Policy::Greedy => {
            let client = match ck.method.prior {
                PriorMode::Llm => Some(
                    PriorClient::from_config(&args.provider.apply(ProviderConfig::default()).map_err(config_error)?)
                        .map_err(config_error)?,
                ),
                _ => None,
            };
            let priors = PriorSource::new(ck.method.prior, client.as_ref(), &t)?;
            evaluate_seeded(&ck.spec, &ck.arch, &ck.params, &priors, args.episodes, args.seed)?
        }
    };
    let m = mean(&returns);
    let var = returns.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (returns.len().max(2) - 1) as f64;
    let ci95 = 1.96 * (var / returns.len() as f64).sqrt();
    let policy = match args.policy {
        Policy::Greedy => "greedy",
        Policy::Random => "random",
    };
    if args.json {
        print_json(&json!({
            "scenario": ck.spec.scenario,
            "method": ck.method.label(),
            "policy": policy,
            "episodes": returns.len(),
            "mean_return": m,
            "std_return": var.sqrt(),
            "ci95": ci95,
        }));
    } else {
        println!(
            "{} {} ({policy}): mean return {m:.3} ± {ci95:.3} (95% CI) over {} episodes",
            ck.spec.scenario,
            ck.method,
            returns.len()
        );
    }
    Ok(())
}

fn experiment(args: ExperimentArgs) -> CliResult {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(config_error)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.provider = args.provider.apply(cfg.provider).map_err(config_error)?;
    let runner = TrainingRunner::from_config(&cfg).map_err(config_error)?;
    let table = run_experiment(&cfg, &runner, args.jobs)?;
    if args.json {
        let rows: Vec<_> = table
            .rows
            .iter()
            .map(|r| {
                json!({
                    "scenario": r.scenario,
                    "method": r.method.label(),
                    "mean": r.mean,
                    "std": r.std,
                    "completed_seeds": r.completed.iter().map(|c| c.seed).collect::<Vec<_>>(),
                    "failed_seeds": r.failed.iter().map(|(s, e)| json!({"seed": s, "error": e})).collect::<Vec<_>>(),
                })
            })
            .collect();
        print_json(&json!({ "rows": rows, "provider_calls": runner.client.provider_calls() }));
    } else {
        print!("{}", table.to_text());
        println!("\nresults written to {}", cfg.output_dir.display());
    }
    if table.rows.iter().all(|r| r.completed.is_empty()) {
        return Err(Failure {
            code: 1,
            message: "every run failed".into(),
        });
    }
    Ok(())
}

fn validate(args: ValidateArgs) -> CliResult {
    let cfg = args.provider.apply(ProviderConfig::default()).map_err(config_error)?;
    let client = PriorClient::from_config(&cfg).map_err(config_error)?;
    let report = validate_provider(&client);
    if args.json {
        print_json(&serde_json::to_value(&report).expect("report serializes"));
    } else {
        println!("provider: {} ({})", report.provider, report.model);
        println!("latency: {:.1} ms", report.latency_ms);
        if let Some(e) = &report.provider_error {
            println!("provider error: {e}");
        }
        if let Some(e) = &report.parse_error {
            println!("parse failure: {e}");
        }
        if let Some(s) = report.symmetry_error {
            println!("symmetry error: {s:.6}");
        }
        for w in &report.warnings {
            println!("warning: {w}");
        }
        println!("{}", if report.passed { "PASS" } else { "FAIL" });
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: "provider validation failed".into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Describe(a) => describe(a),
        Command::GenPrior(a) => gen_prior(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Experiment(a) => experiment(a),
        Command::ValidateProvider(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
