//! Coordination-graph priors from a language model.
//!
//! Pipeline: per-agent summaries -> [`build_prompt`] -> a [`Provider`]
//! (chat-completions HTTP endpoint or a deterministic mock) ->
//! [`parse_adjacency`] -> [`postprocess`]. [`prior_for_episode`] runs the
//! whole chain and falls back to a uniform prior on any failure.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::describe::{ObservationSummary, TemplateSet};
use crate::env::{self, AgentObservation, Role, ScenarioId, ScenarioSpec};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Rows whose sum falls below this are treated as empty.
pub const DEGENERATE_ROW_SUM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub n: usize,
    /// Hex SHA-256 of the system and user text.
    pub hash: String,
    pub scenario: ScenarioId,
    pub roles: Vec<Role>,
    pub summaries: Vec<String>,
}

fn task_description(scenario: ScenarioId) -> &'static str {
    match scenario {
        ScenarioId::SpeakerListener => {
            "A stationary speaker knows which landmark is the goal but cannot move; it can only \
             emit a symbol each step. A mobile listener hears the symbol and must reach the goal \
             landmark without being told which one it is."
        }
        ScenarioId::Reference => {
            "Two navigators must each reach their own target landmark. Each navigator knows only \
             the other navigator's target, not its own."
        }
        ScenarioId::CooperativePush => {
            "Several pushers must move a heavy object onto a target location. The object is too \
             heavy for one pusher alone; it only moves when pushers push it together."
        }
        ScenarioId::Adversary => {
            "A team of evaders must reach a target landmark while a pursuer tries to tag them. \
             Reaching the target earns reward and being tagged costs reward."
        }
    }
}

/// Assembles the zero-shot prompt for one set of summaries.
pub fn build_prompt(summaries: &[ObservationSummary], spec: &ScenarioSpec) -> Result<PromptBundle> {
    let n = spec.n_agents;
    let mut by_agent: Vec<Option<&ObservationSummary>> = vec![None; n];
    for s in summaries {
        if s.agent >= n {
            return Err(Error::Usage(format!("summary for agent {} but only {n} agents", s.agent)));
        }
        if s.scenario != spec.scenario {
            return Err(Error::Usage(format!(
                "summary from {} used with {}",
                s.scenario, spec.scenario
            )));
        }
        if by_agent[s.agent].replace(s).is_some() {
            return Err(Error::Usage(format!("duplicate summary for agent {}", s.agent)));
        }
    }
    if let Some(missing) = by_agent.iter().position(Option::is_none) {
        return Err(Error::Usage(format!("missing summary for agent {missing}")));
    }
    let by_agent: Vec<&ObservationSummary> = by_agent.into_iter().flatten().collect();
    let roles = spec.roles();

    let role_list = roles
        .iter()
        .enumerate()
        .map(|(i, r)| format!("agent {i} is a {r}"))
        .collect::<Vec<_>>()
        .join(", ");
    let system = format!(
        "You are analysing a cooperative multi-agent task in which all agents share one team \
         reward. {} Roles: {role_list}. Judge which agents would benefit from coordinating \
         with one another given their current observations.",
        task_description(spec.scenario)
    );

    let mut user = String::from("Current observations:\n");
    for s in &by_agent {
        user.push_str(&format!("Agent {}: {}\n", s.agent, s.text));
    }
    user.push_str(&format!(
        "\nReturn only a valid {n}x{n} JSON matrix (an array of {n} arrays of {n} numbers) with \
         real-valued entries in the range [0, 1], where entry [i][j] is the coordination affinity \
         between agent i and agent j and larger values indicate stronger coordination. The matrix \
         must be symmetric: entry [i][j] must equal entry [j][i]. Do not output anything except \
         the matrix."
    ));

    let hash = digest_hex(&[system.as_bytes(), b"\0", user.as_bytes()]);
    Ok(PromptBundle {
        system,
        user,
        n,
        hash,
        scenario: spec.scenario,
        roles,
        summaries: by_agent.iter().map(|s| s.text.clone()).collect(),
    })
}

fn digest_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    Network,
    Protocol,
    Timeout,
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureCategory::Network => "network",
            FailureCategory::Protocol => "protocol",
            FailureCategory::Timeout => "timeout",
        })
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("provider failure ({category}): {message}")]
pub struct ProviderFailure {
    pub category: FailureCategory,
    pub message: String,
}

impl ProviderFailure {
    fn new(category: FailureCategory, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseFailure {
    #[error("no JSON matrix found in response")]
    NoMatrix,
    #[error("matrix has wrong shape: expected {expected}x{expected}, found {rows} rows (row lengths {row_lengths:?})")]
    WrongShape {
        expected: usize,
        rows: usize,
        row_lengths: Vec<usize>,
    },
    #[error("matrix entry [{row}][{col}] is not a number")]
    NonNumeric { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpChat,
    MockUniform,
    MockHeuristic,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::HttpChat => "http_chat",
            ProviderKind::MockUniform => "mock_uniform",
            ProviderKind::MockHeuristic => "mock_heuristic",
        }
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "http_chat" => Ok(ProviderKind::HttpChat),
            "mock_uniform" => Ok(ProviderKind::MockUniform),
            "mock_heuristic" => Ok(ProviderKind::MockHeuristic),
            other => Err(Error::Invalid(format!("unknown provider kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub base_url: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    pub retry_count: u32,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::MockUniform,
            base_url: None,
            model: "local-model".to_string(),
            temperature: 0.0,
            max_tokens: 256,
            timeout_secs: 30.0,
            retry_count: 2,
            cache_dir: None,
        }
    }
}

impl ProviderConfig {
    pub fn mock(kind: ProviderKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ProviderKind::HttpChat && self.base_url.as_deref().map_or(true, str::is_empty) {
            return Err(Error::Invalid("http_chat provider requires a base URL".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Invalid(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Invalid("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// A source of raw model text for a prompt.
pub trait Provider: Send + Sync {
    fn id(&self) -> &str;
    fn model(&self) -> &str;
    fn complete(&self, bundle: &PromptBundle) -> Result<String, ProviderFailure>;
}

/// Returns all off-diagonal weights `1/(n-1)`.
#[derive(Debug, Default)]
pub struct MockUniform;

impl Provider for MockUniform {
    fn id(&self) -> &str {
        "mock_uniform"
    }

    fn model(&self) -> &str {
        "mock_uniform"
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, ProviderFailure> {
        Ok(serialize_matrix(&uniform_off_diagonal(bundle.n)))
    }
}

/// Rule-based weights from agent roles, modulated by how close each agent
/// says it is to the entity that matters for its role.
#[derive(Debug, Default)]
pub struct MockHeuristic;

fn proximity(summary: &str, entity: &str) -> f64 {
    if summary.contains(&format!("{entity} is close")) {
        1.0
    } else if summary.contains(&format!("{entity} is at medium range")) {
        0.6
    } else {
        0.3
    }
}

impl MockHeuristic {
    pub fn weights(bundle: &PromptBundle) -> Matrix {
        let n = bundle.n;
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (ri, rj) = (bundle.roles[i], bundle.roles[j]);
                let (si, sj) = (&bundle.summaries[i], &bundle.summaries[j]);
                let w = match (ri, rj) {
                    (Role::Speaker, Role::Listener) | (Role::Listener, Role::Speaker) => 1.0,
                    (Role::Navigator, Role::Navigator) => 1.0,
                    (Role::Pusher, Role::Pusher) => {
                        proximity(si, "the object") * proximity(sj, "the object")
                    }
                    (Role::Evader, Role::Evader) => {
                        0.5 * (proximity(si, "the adversary") + proximity(sj, "the adversary"))
                    }
                    _ => 0.1,
                };
                m.set(i, j, w);
            }
        }
        m
    }
}

impl Provider for MockHeuristic {
    fn id(&self) -> &str {
        "mock_heuristic"
    }

    fn model(&self) -> &str {
        "mock_heuristic"
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, ProviderFailure> {
        Ok(serialize_matrix(&Self::weights(bundle)))
    }
}

/// Client for any server speaking the chat-completions protocol.
pub struct HttpChat {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    temperature: f64,
    max_tokens: u32,
}

impl HttpChat {
    pub fn new(cfg: &ProviderConfig) -> Result<Self> {
        let base = cfg
            .base_url
            .as_deref()
            .ok_or_else(|| Error::Invalid("http_chat provider requires a base URL".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: format!("{}/v1/chat/completions", base.trim_end_matches('/')),
            model: cfg.model.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn classify(err: ureq::Error) -> ProviderFailure {
    match err {
        ureq::Error::Timeout(t) => ProviderFailure::new(FailureCategory::Timeout, format!("timed out ({t})")),
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => {
            ProviderFailure::new(FailureCategory::Timeout, e.to_string())
        }
        ureq::Error::Protocol(e) => ProviderFailure::new(FailureCategory::Protocol, e.to_string()),
        other => ProviderFailure::new(FailureCategory::Network, other.to_string()),
    }
}

impl Provider for HttpChat {
    fn id(&self) -> &str {
        "http_chat"
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, ProviderFailure> {
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.user},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        let mut resp = self.agent.post(&self.endpoint).send_json(&body).map_err(classify)?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(classify)?;
        if !status.is_success() {
            return Err(ProviderFailure::new(
                FailureCategory::Protocol,
                format!("HTTP {}: {}", status.as_u16(), truncate(&text, 200)),
            ));
        }
        let envelope: Value = serde_json::from_str(&text).map_err(|e| {
            ProviderFailure::new(FailureCategory::Protocol, format!("response is not JSON: {e}"))
        })?;
        envelope
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| {
                ProviderFailure::new(
                    FailureCategory::Protocol,
                    "response lacks choices[0].message.content",
                )
            })
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt: String,
    pub response_text: String,
    pub model: String,
    pub timestamp: u64,
}

/// One JSON file per (prompt hash, model) pair.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(prompt_hash: &str, model: &str) -> String {
        digest_hex(&[prompt_hash.as_bytes(), b"\n", model.as_bytes()])
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, prompt_hash: &str, model: &str) -> Option<CacheEntry> {
        let text = fs::read_to_string(self.path(&Self::key(prompt_hash, model))).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Writes through a temporary file and renames, so readers never see a partial entry.
    pub fn put(&self, prompt_hash: &str, entry: &CacheEntry) -> Result<()> {
        let key = Self::key(prompt_hash, &entry.model);
        let final_path = self.path(&key);
        let tmp = self.dir.join(format!(
            ".{key}.{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        let body = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&body).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
        Ok(())
    }
}

/// Provider plus memory and on-disk response caches, retries and call accounting.
pub struct PriorClient {
    provider: Box<dyn Provider>,
    disk: Option<ResponseCache>,
    memory: Mutex<HashMap<String, String>>,
    provider_calls: AtomicUsize,
    retry_count: u32,
}

impl PriorClient {
    pub fn new(provider: Box<dyn Provider>, disk: Option<ResponseCache>, retry_count: u32) -> Self {
        Self {
            provider,
            disk,
            memory: Mutex::new(HashMap::new()),
            provider_calls: AtomicUsize::new(0),
            retry_count,
        }
    }

    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let provider: Box<dyn Provider> = match cfg.kind {
            ProviderKind::HttpChat => Box::new(HttpChat::new(cfg)?),
            ProviderKind::MockUniform => Box::new(MockUniform),
            ProviderKind::MockHeuristic => Box::new(MockHeuristic),
        };
        let disk = cfg.cache_dir.as_ref().map(ResponseCache::new).transpose()?;
        Ok(Self::new(provider, disk, cfg.retry_count))
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn model(&self) -> &str {
        self.provider.model()
    }

    /// Number of times the underlying provider was actually invoked.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    /// Raw response text, served from cache when available. Failed attempts
    /// are retried `retry_count` times.
    pub fn query(&self, bundle: &PromptBundle) -> Result<String, ProviderFailure> {
        let key = ResponseCache::key(&bundle.hash, self.provider.model());
        if let Some(hit) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        if let Some(entry) = self.disk.as_ref().and_then(|d| d.get(&bundle.hash, self.provider.model())) {
            self.memory
                .lock()
                .expect("cache lock")
                .insert(key, entry.response_text.clone());
            return Ok(entry.response_text);
        }
        let mut last = None;
        for attempt in 0..=self.retry_count {
            self.provider_calls.fetch_add(1, Ordering::SeqCst);
            match self.provider.complete(bundle) {
                Ok(text) => {
                    if let Some(disk) = &self.disk {
                        let entry = CacheEntry {
                            prompt: format!("{}\n\n{}", bundle.system, bundle.user),
                            response_text: text.clone(),
                            model: self.provider.model().to_string(),
                            timestamp: SystemTime::now()
                                .duration_since(UNIX_EPOCH)
                                .map_or(0, |d| d.as_secs()),
                        };
                        if let Err(e) = disk.put(&bundle.hash, &entry) {
                            log::warn!("could not write prior cache entry: {e}");
                        }
                    }
                    self.memory.lock().expect("cache lock").insert(key, text.clone());
                    return Ok(text);
                }
                Err(e) => {
                    log::warn!("provider attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAdjacency {
    pub matrix: Matrix,
    pub source_text: String,
    pub provider: String,
    pub model: String,
}

/// JSON text of a matrix; `parse_adjacency` reads it back exactly.
pub fn serialize_matrix(m: &Matrix) -> String {
    serde_json::to_string(&m.to_rows()).expect("finite matrix serializes")
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(x) => x.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok().filter(|x| x.is_finite()),
        _ => None,
    }
}

fn matrix_from_rows(rows: &[Value], n: usize) -> Result<Matrix, ParseFailure> {
    let row_lengths: Vec<usize> = rows
        .iter()
        .map(|r| r.as_array().map_or(0, Vec::len))
        .collect();
    if rows.len() != n || row_lengths.iter().any(|&l| l != n) {
        return Err(ParseFailure::WrongShape {
            expected: n,
            rows: rows.len(),
            row_lengths,
        });
    }
    let mut m = Matrix::zeros(n, n);
    let mut clamped = 0;
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.as_array().expect("checked above").iter().enumerate() {
            let x = as_number(v).ok_or(ParseFailure::NonNumeric { row: i, col: j })?;
            let c = x.clamp(0.0, 1.0);
            if c != x {
                clamped += 1;
            }
            m.set(i, j, c);
        }
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} adjacency entries into [0, 1]");
    }
    Ok(m)
}

/// Retries a bracketed span with trailing commas removed, as in `[[0, 1,], [1, 0,],]`.
fn lenient_array(text: &str) -> Option<Vec<Value>> {
    let mut depth = 0usize;
    let mut end = None;
    for (i, c) in text.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    end = Some(i);
                    break;
                }
            }
            '"' | '{' | '}' => return None,
            _ => {}
        }
    }
    let span = &text[..=end?];
    let mut cleaned = String::with_capacity(span.len());
    // a comma and the whitespace after it, held until the next token is known
    let mut pending: Option<String> = None;
    for c in span.chars() {
        if let Some(p) = pending.as_mut() {
            if c.is_whitespace() {
                p.push(c);
                continue;
            }
            let p = pending.take().expect("checked above");
            cleaned.push_str(if c == ']' { &p[1..] } else { &p });
        }
        if c == ',' {
            pending = Some(String::from(","));
        } else {
            cleaned.push(c);
        }
    }
    match serde_json::from_str(&cleaned) {
        Ok(Value::Array(rows)) => Some(rows),
        _ => None,
    }
}

/// Extracts the first `n x n` numeric JSON array-of-arrays from free text.
///
/// Surrounding prose, code fences and reasoning tags are skipped. When no
/// well-formed `n x n` matrix exists, the first problem seen with an
/// array-of-arrays candidate is reported.
pub fn parse_adjacency(text: &str, n: usize) -> Result<Matrix, ParseFailure> {
    let mut first_problem = None;
    for (start, _) in text.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        let rows = match stream.next() {
            Some(Ok(Value::Array(rows))) => rows,
            Some(Err(_)) => match lenient_array(&text[start..]) {
                Some(rows) => rows,
                None => continue,
            },
            _ => continue,
        };
        if rows.is_empty() || !rows.iter().all(Value::is_array) {
            continue;
        }
        match matrix_from_rows(&rows, n) {
            Ok(m) => return Ok(m),
            Err(e) => {
                first_problem.get_or_insert(e);
            }
        }
    }
    Err(first_problem.unwrap_or(ParseFailure::NoMatrix))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt_hash: Option<String>,
    pub provider: String,
    pub model: String,
    pub fallback: bool,
    pub raw_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPrior {
    pub matrix: Matrix,
    pub provenance: Provenance,
}

impl GraphPrior {
    /// The prior used whenever the model cannot be queried or parsed.
    pub fn uniform_fallback(n: usize, prompt_hash: Option<String>) -> Self {
        Self {
            matrix: postprocess_stages(&Matrix::zeros(n, n)).prior,
            provenance: Provenance {
                prompt_hash,
                provider: "fallback".to_string(),
                model: "uniform".to_string(),
                fallback: true,
                raw_text: None,
            },
        }
    }

    /// Post-processed `mock_uniform` matrix, used as a deliberate constant prior.
    pub fn uniform(n: usize) -> Self {
        Self {
            matrix: postprocess_stages(&uniform_off_diagonal(n)).prior,
            provenance: Provenance {
                prompt_hash: None,
                provider: "constant".to_string(),
                model: "uniform".to_string(),
                fallback: false,
                raw_text: None,
            },
        }
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }
}

pub fn uniform_off_diagonal(n: usize) -> Matrix {
    let w = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
    let mut m = Matrix::filled(n, n, w);
    for i in 0..n {
        m.set(i, i, 0.0);
    }
    m
}

/// Intermediate results of post-processing, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessStages {
    /// `(Â + Âᵀ) / 2`
    pub symmetrized: Matrix,
    /// Row-normalized; rows summing below [`DEGENERATE_ROW_SUM`] become `1/n` everywhere.
    pub normalized: Matrix,
    /// `normalized + I`
    pub prior: Matrix,
    pub degenerate_rows: Vec<usize>,
}

/// Symmetrize, row-normalize, then add self-loops.
pub fn postprocess_stages(raw: &Matrix) -> PostprocessStages {
    let n = raw.rows();
    debug_assert_eq!(raw.rows(), raw.cols());
    let mut sym = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym.set(i, j, 0.5 * (raw.get(i, j) + raw.get(j, i)));
        }
    }
    let mut norm = sym.clone();
    let mut degenerate_rows = Vec::new();
    for i in 0..n {
        let row = norm.row_mut(i);
        let total: f64 = row.iter().sum();
        if total >= DEGENERATE_ROW_SUM {
            for x in row.iter_mut() {
                *x /= total;
            }
        } else {
            // maximum-entropy row, self included
            degenerate_rows.push(i);
            row.fill(1.0 / n as f64);
        }
    }
    let mut prior = norm.clone();
    for i in 0..n {
        prior.set(i, i, prior.get(i, i) + 1.0);
    }
    PostprocessStages {
        symmetrized: sym,
        normalized: norm,
        prior,
        degenerate_rows,
    }
}

pub fn postprocess(raw: &RawAdjacency, prompt_hash: Option<String>) -> GraphPrior {
    GraphPrior {
        matrix: postprocess_stages(&raw.matrix).prior,
        provenance: Provenance {
            prompt_hash,
            provider: raw.provider.clone(),
            model: raw.model.clone(),
            fallback: false,
            raw_text: Some(raw.source_text.clone()),
        },
    }
}

/// Largest `|Â_ij - Â_ji|`.
pub fn symmetry_error(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            worst = worst.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    worst
}

/// Prompt for the given reset-time observations.
pub fn prompt_for_observations(
    observations: &[AgentObservation],
    spec: &ScenarioSpec,
    templates: &TemplateSet,
) -> Result<PromptBundle> {
    let summaries = observations
        .iter()
        .enumerate()
        .map(|(i, o)| templates.describe(o, i, spec))
        .collect::<Result<Vec<_>>>()?;
    build_prompt(&summaries, spec)
}

/// Describe, prompt, query, parse and post-process; never fails.
pub fn prior_for_episode(
    observations: &[AgentObservation],
    spec: &ScenarioSpec,
    client: &PriorClient,
    templates: &TemplateSet,
) -> GraphPrior {
    let n = spec.n_agents;
    let bundle = match prompt_for_observations(observations, spec, templates) {
        Ok(b) => b,
        Err(e) => {
            log::warn!("could not build prompt, using fallback prior: {e}");
            return GraphPrior::uniform_fallback(n, None);
        }
    };
    let text = match client.query(&bundle) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("provider exhausted retries, using fallback prior: {e}");
            return GraphPrior::uniform_fallback(n, Some(bundle.hash));
        }
    };
    match parse_adjacency(&text, n) {
        Ok(matrix) => postprocess(
            &RawAdjacency {
                matrix,
                source_text: text,
                provider: client.provider_id().to_string(),
                model: client.model().to_string(),
            },
            Some(bundle.hash),
        ),
        Err(e) => {
            log::warn!("unparseable provider response, using fallback prior: {e}");
            let mut p = GraphPrior::uniform_fallback(n, Some(bundle.hash));
            p.provenance.raw_text = Some(text);
            p
        }
    }
}

/// Fixed three-agent prompt used to check that a provider is usable.
pub fn probe_bundle() -> PromptBundle {
    let spec = ScenarioSpec::new(ScenarioId::CooperativePush);
    let (_, obs) = env::reset(&spec, 0).expect("default push spec is valid");
    prompt_for_observations(&obs, &spec, &TemplateSet::default()).expect("probe prompt builds")
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub provider: String,
    pub model: String,
    pub latency_ms: f64,
    pub response_text: Option<String>,
    pub parse_error: Option<String>,
    pub provider_error: Option<String>,
    pub symmetry_error: Option<f64>,
    pub warnings: Vec<String>,
}

/// Sends the probe prompt and checks that a symmetric-enough matrix comes back.
pub fn validate_provider(client: &PriorClient) -> ValidationReport {
    let bundle = probe_bundle();
    let start = Instant::now();
    let result = client.query(&bundle);
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut report = ValidationReport {
        passed: false,
        provider: client.provider_id().to_string(),
        model: client.model().to_string(),
        latency_ms,
        response_text: None,
        parse_error: None,
        provider_error: None,
        symmetry_error: None,
        warnings: Vec::new(),
    };
    match result {
        Err(e) => report.provider_error = Some(e.to_string()),
        Ok(text) => {
            match parse_adjacency(&text, bundle.n) {
                Ok(m) => {
                    let err = symmetry_error(&m);
                    if err > 1e-9 {
                        report
                            .warnings
                            .push(format!("response matrix is not symmetric (max |A - A^T| = {err})"));
                    }
                    report.symmetry_error = Some(err);
                    report.passed = true;
                }
                Err(e) => report.parse_error = Some(e.to_string()),
            }
            report.response_text = Some(text);
        }
    }
    report
}
