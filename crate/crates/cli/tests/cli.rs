use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coordprior"));
    c.env_remove("PRIOR_PROVIDER_URL");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json_of(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", stdout(o)))
}

/// Minimal chat-completions server answering every request with `content`.
struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
}

fn stub(content: &str) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let body = serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
            let mut request = vec![0; length];
            let _ = reader.read_exact(&mut request);
            counter.fetch_add(1, Ordering::SeqCst);
            let reply = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    Stub { url, hits }
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["describe", "gen-prior", "train", "eval", "experiment", "validate-provider"] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
    assert!(run(&["--help"]).status.success());
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["train", "--nonsense"]).status.code(), Some(2));
}

#[test]
fn describe_prints_one_line_per_agent() {
    let o = run(&["describe", "--scenario", "cooperative_push", "--seed", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.starts_with("Agent ")));
    assert!(text.contains("pusher"));
    let j = json_of(&run(&["describe", "--scenario", "speaker_listener", "--json"]));
    assert_eq!(j["summaries"].as_array().unwrap().len(), 2);
    assert_eq!(run(&["describe", "--scenario", "tag"]).status.code(), Some(2));
}

#[test]
fn gen_prior_with_mocks() {
    let j = json_of(&run(&["gen-prior", "--scenario", "speaker_listener", "--provider", "mock_uniform", "--json"]));
    assert_eq!(j["matrix"], serde_json::json!([[1.0, 1.0], [1.0, 1.0]]));
    assert_eq!(j["fallback"], false);
    assert!(j["prompt"]["user"].as_str().unwrap().contains("Agent 1:"));
}

#[test]
fn gen_prior_dry_run_never_calls_the_provider() {
    let s = stub("[[0, 1], [1, 0]]");
    let o = run(&[
        "gen-prior", "--scenario", "reference", "--provider", "http_chat", "--base-url", &s.url, "--dry-run", "--json",
    ]);
    assert!(o.status.success());
    let j = json_of(&o);
    assert_eq!(j["provider_calls"], 0);
    assert!(j.get("matrix").is_none());
    assert_eq!(s.hits.load(Ordering::SeqCst), 0);
}

#[test]
fn gen_prior_reports_the_stub_body_verbatim() {
    let body = "Here you go:\n```json\n[[0.0, 0.8], [0.6, 0.0]]\n```";
    let s = stub(body);
    let o = run(&["gen-prior", "--scenario", "speaker_listener", "--provider", "http_chat", "--base-url", &s.url, "--json"]);
    assert!(o.status.success());
    let j = json_of(&o);
    assert_eq!(j["raw_response"], body);
    assert_eq!(j["fallback"], false);
    assert_eq!(j["matrix"], serde_json::json!([[1.0, 1.0], [1.0, 1.0]]));
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn gen_prior_falls_back_but_succeeds_on_prose() {
    let s = stub("I think the agents should cooperate closely.");
    let o = run(&["gen-prior", "--scenario", "speaker_listener", "--provider", "http_chat", "--base-url", &s.url, "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let j = json_of(&o);
    assert_eq!(j["fallback"], true);
    assert_eq!(j["matrix"], serde_json::json!([[1.5, 0.5], [0.5, 1.5]]));
}

#[test]
fn environment_url_yields_to_the_flag() {
    let from_env = stub("[[0,1],[1,0]]");
    let from_flag = stub("[[0,1],[1,0]]");
    let o = bin()
        .env("PRIOR_PROVIDER_URL", &from_env.url)
        .args(["gen-prior", "--scenario", "reference", "--provider", "http_chat", "--base-url", &from_flag.url])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!((from_env.hits.load(Ordering::SeqCst), from_flag.hits.load(Ordering::SeqCst)), (0, 1));
    let o = bin()
        .env("PRIOR_PROVIDER_URL", &from_env.url)
        .args(["gen-prior", "--scenario", "reference", "--provider", "http_chat"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(from_env.hits.load(Ordering::SeqCst), 1);
    // no URL anywhere is a configuration error
    assert_eq!(run(&["gen-prior", "--scenario", "reference", "--provider", "http_chat"]).status.code(), Some(2));
}

#[test]
fn train_smoke_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train", "--scenario", "reference", "--method", "vdn", "--steps", "1000", "--seed", "3", "--out",
        out.to_str().unwrap(), "--json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("log.csv")).unwrap();
    assert!(log.lines().count() > 1);
    assert!(log.starts_with("step,episode,mean_eval_return,loss,epsilon,fallback_rate"));
    assert!(out.join("checkpoint.txt").exists());
    assert_eq!(json_of(&o)["env_steps"], 1000);
}

#[test]
fn fresh_checkpoint_evaluates_like_random_play() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fresh");
    // one episode is below the batch size, so no update happens
    let o = run(&[
        "train", "--scenario", "cooperative_push", "--method", "qmix", "--steps", "25", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let ck = out.join("checkpoint.txt");
    let ck = ck.to_str().unwrap();
    let args = |policy: &str| {
        json_of(&run(&["eval", "--checkpoint", ck, "--episodes", "200", "--seed", "11", "--policy", policy, "--json"]))
    };
    let random = args("random");
    let greedy = args("greedy");
    let (r, ci) = (random["mean_return"].as_f64().unwrap(), random["ci95"].as_f64().unwrap());
    let g = greedy["mean_return"].as_f64().unwrap();
    assert!((g - r).abs() <= ci, "greedy {g} vs random {r} ± {ci}");
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let o = run(&["eval", "--checkpoint", "/definitely/not/here.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.ini");
    std::fs::write(
        &path,
        format!(
            "[experiment]\nscenarios = reference\nmethods = iql, ours-heuristic\nseeds = 0, 1\noutput_dir = {}\n\n[train]\ntotal_steps = 200\nbatch_size = 2\neval_interval = 100\neval_episodes = 2\ngnn_hidden = 8\nagent_hidden = 8\nmixer_hidden = 4\n{extra}",
            dir.join("out").display()
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn experiment_produces_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = run(&["experiment", "--config", &cfg, "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("reference,iql,"));
    assert!(rows[1].starts_with("reference,ours-heuristic,"));
    assert!(dir.path().join("out/reference/iql/seed_1/log.csv").exists());
    assert!(std::fs::read_to_string(dir.path().join("out/results.txt")).unwrap().contains("population std"));
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "leraning_rate = 0.1\n");
    let o = run(&["experiment", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("leraning_rate"));
    assert_eq!(run(&["experiment", "--config", "/no/such/file.ini"]).status.code(), Some(2));
}

#[test]
fn validate_provider_reports() {
    let o = run(&["validate-provider", "--provider", "mock_heuristic", "--json"]);
    assert!(o.status.success());
    let j = json_of(&o);
    assert_eq!(j["passed"], true);
    assert!(j["latency_ms"].as_f64().unwrap() < 100.0);

    let prose = stub("Agents 0 and 1 should coordinate; agent 2 is independent.");
    let o = run(&["validate-provider", "--provider", "http_chat", "--base-url", &prose.url]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("parse failure"), "{}", stdout(&o));

    let raw: [[f64; 3]; 3] = [[0.0, 0.9, 0.1], [0.5, 0.0, 0.3], [0.1, 0.2, 0.0]];
    let asym = stub(&serde_json::to_string(&raw).unwrap());
    let o = run(&["validate-provider", "--provider", "http_chat", "--base-url", &asym.url, "--json"]);
    assert!(o.status.success());
    let j = json_of(&o);
    let mut expected: f64 = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            expected = expected.max((raw[i][k] - raw[k][i]).abs());
        }
    }
    assert!((j["symmetry_error"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert!(!j["warnings"].as_array().unwrap().is_empty());

    let dead = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", dead.local_addr().unwrap());
    drop(dead);
    let o = run(&["validate-provider", "--provider", "http_chat", "--base-url", &url, "--retries", "0"]);
    assert_eq!(o.status.code(), Some(1));
}
