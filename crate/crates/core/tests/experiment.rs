use std::fs;
use std::path::Path;

use coordprior::env::{ScenarioId, ScenarioSpec};
use coordprior::harness::{run_experiment, ExperimentConfig, SeedRunner, TrainingRunner};
use coordprior::learn::{LogRow, Method, TrainingLog};
use coordprior::{Error, Result};

fn small_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "# tiny run\n[experiment]\nscenarios = reference, speaker_listener\nmethods = vdn, ours-heuristic\nseeds = 0, 1, 2\noutput_dir = {}\n\n[train]\ntotal_steps = 150\nbatch_size = 2\neval_interval = 50\neval_episodes = 3\ngnn_hidden = 8\nagent_hidden = 8\nmixer_hidden = 4\n\n[provider]\nkind = mock_heuristic\n",
        out.display()
    ))
    .unwrap()
}

/// Last `mean_eval_return` field of a log, read as plain text.
fn final_return_from_csv(path: &Path) -> f64 {
    let text = fs::read_to_string(path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "mean_eval_return").unwrap();
    text.lines().last().unwrap().split(',').nth(col).unwrap().parse().unwrap()
}

#[test]
fn results_table_agrees_with_per_seed_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let runner = TrainingRunner::from_config(&cfg).unwrap();
    let table = run_experiment(&cfg, &runner, 2).unwrap();
    assert_eq!(table.rows.len(), 4);

    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scenario,method,mean_final_return,std_final_return,completed_seeds,failed_seeds");
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let finals: Vec<f64> = (0..3)
            .map(|s| final_return_from_csv(&dir.path().join(f[0]).join(f[1]).join(format!("seed_{s}")).join("log.csv")))
            .collect();
        let mean = finals.iter().sum::<f64>() / 3.0;
        let std = (finals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 3.0).sqrt();
        let (got_mean, got_std): (f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap());
        assert!((got_mean - mean).abs() < 1e-12, "{line}");
        assert!((got_std - std).abs() < 1e-12, "{line}");
        assert_eq!((f[4], f[5]), ("3", ""));
    }
    let used = ExperimentConfig::load(&dir.path().join("config.ini")).unwrap();
    assert_eq!(used, cfg);
}

#[test]
fn worker_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (small_config(a.path()), small_config(b.path()));
    run_experiment(&ca, &TrainingRunner::from_config(&ca).unwrap(), 1).unwrap();
    run_experiment(&cb, &TrainingRunner::from_config(&cb).unwrap(), 3).unwrap();
    let read = |d: &Path| fs::read_to_string(d.join("results.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

struct FlakyRunner;

impl SeedRunner for FlakyRunner {
    fn run(&self, _: &ScenarioSpec, _: Method, seed: u64) -> Result<TrainingLog> {
        if seed == 1 {
            return Err(Error::Invalid("diverged".into()));
        }
        Ok(TrainingLog {
            rows: vec![LogRow {
                step: 10,
                episode: 1,
                mean_eval_return: seed as f64 * 4.0,
                loss: f64::NAN,
                epsilon: 1.0,
                fallback_rate: 0.0,
            }],
        })
    }
}

#[test]
fn failed_seeds_are_reported_and_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let table = run_experiment(&cfg, &FlakyRunner, 1).unwrap();
    let row = &table.rows[0];
    assert_eq!(row.scenario, ScenarioId::Reference);
    // seeds 0 and 2 give 0 and 8
    assert_eq!((row.mean, row.std), (4.0, 4.0));
    assert_eq!(row.failed.len(), 1);
    assert_eq!(row.failed[0].0, 1);
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",4,4,2,1"));
}

#[test]
fn config_round_trip_is_canonical() {
    let messy = "[train]\n  lr=0.001\n; comment\nprior_mode = heuristic\n[experiment]\nmethods = ours , qmix\nscenarios=adversary\nseeds = 4,2\n[env]\nt_max = 30\n";
    let cfg = ExperimentConfig::parse(messy).unwrap();
    let canonical = cfg.serialize();
    let again = ExperimentConfig::parse(&canonical).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.serialize(), canonical);
    assert!(canonical.contains("methods = ours-heuristic, qmix"));
    assert!(canonical.contains("seeds = 4, 2"));
}
