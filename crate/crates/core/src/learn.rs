//! Value-based cooperative learners: independent Q-learning, additive (VDN)
//! and monotonic (QMIX) value decomposition, and QMIX over graph-aggregated
//! embeddings driven by a per-episode coordination prior.
//!
//! All agents share one Q-network body; an agent one-hot is appended to its
//! input. Targets use the online network for the next-step argmax and the
//! target network for its value.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::describe::TemplateSet;
use crate::env::{self, AgentObservation, JointAction, ScenarioSpec};
use crate::error::{Error, Result};
use crate::gnn::{gnn_backward, gnn_forward_batch, GnnConfig, GnnForwardTrace, GnnParams};
use crate::numeric::{
    elu, elu_grad, relu_backward_matrix, relu_matrix, Adam, AdamConfig, Linear, Matrix, Parameters,
};
use crate::prior::{prior_for_episode, GraphPrior, MockHeuristic, PriorClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Iql,
    Vdn,
    Qmix,
    /// QMIX whose agents read graph-aggregated embeddings instead of raw observations.
    Ours,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Iql => "iql",
            Algorithm::Vdn => "vdn",
            Algorithm::Qmix => "qmix",
            Algorithm::Ours => "ours",
        }
    }

    fn uses_mixer(self) -> bool {
        matches!(self, Algorithm::Qmix | Algorithm::Ours)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "iql" => Ok(Algorithm::Iql),
            "vdn" => Ok(Algorithm::Vdn),
            "qmix" => Ok(Algorithm::Qmix),
            "ours" => Ok(Algorithm::Ours),
            other => Err(Error::Usage(format!(
                "unknown algorithm '{other}' (expected iql, vdn, qmix or ours)"
            ))),
        }
    }
}

/// Where the per-episode coordination prior comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    None,
    /// Constant post-processed uniform graph; isolates GNN capacity from prior content.
    Uniform,
    MockHeuristic,
    /// Whatever provider the run was configured with.
    Llm,
}

impl PriorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorMode::None => "none",
            PriorMode::Uniform => "uniform",
            PriorMode::MockHeuristic => "mock_heuristic",
            PriorMode::Llm => "llm",
        }
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(PriorMode::None),
            "uniform" => Ok(PriorMode::Uniform),
            "mock_heuristic" | "heuristic" => Ok(PriorMode::MockHeuristic),
            "llm" => Ok(PriorMode::Llm),
            other => Err(Error::Usage(format!(
                "unknown prior mode '{other}' (expected none, uniform, mock_heuristic or llm)"
            ))),
        }
    }
}

/// A learner together with its prior source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Method {
    pub algorithm: Algorithm,
    pub prior: PriorMode,
}

impl Method {
    pub fn new(algorithm: Algorithm, prior: PriorMode) -> Result<Self> {
        let m = Self { algorithm, prior };
        m.validate()?;
        Ok(m)
    }

    pub fn baseline(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            prior: PriorMode::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.algorithm, self.prior) {
            (Algorithm::Ours, PriorMode::None) => Err(Error::Usage(
                "the graph learner needs a prior mode other than none".into(),
            )),
            (Algorithm::Ours, _) | (_, PriorMode::None) => Ok(()),
            (a, p) => Err(Error::Usage(format!("{a} does not consume a prior (got {p})"))),
        }
    }

    /// Parses `iql`, `vdn`, `qmix`, `ours` (taking `default_prior`) or
    /// `ours-uniform`, `ours-heuristic`, `ours-llm`.
    pub fn parse(token: &str, default_prior: PriorMode) -> Result<Self> {
        let token = token.trim();
        let m = match token {
            "ours" => Method {
                algorithm: Algorithm::Ours,
                prior: default_prior,
            },
            "ours-uniform" => Method {
                algorithm: Algorithm::Ours,
                prior: PriorMode::Uniform,
            },
            "ours-heuristic" => Method {
                algorithm: Algorithm::Ours,
                prior: PriorMode::MockHeuristic,
            },
            "ours-llm" => Method {
                algorithm: Algorithm::Ours,
                prior: PriorMode::Llm,
            },
            other => Method::baseline(other.parse()?),
        };
        m.validate()?;
        Ok(m)
    }

    /// Stable label used in directory names and tables.
    pub fn label(&self) -> String {
        match (self.algorithm, self.prior) {
            (Algorithm::Ours, PriorMode::Uniform) => "ours-uniform".into(),
            (Algorithm::Ours, PriorMode::MockHeuristic) => "ours-heuristic".into(),
            (Algorithm::Ours, _) => "ours-llm".into(),
            (a, _) => a.as_str().into(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Replay capacity, counted in whole episodes.
    pub buffer_capacity: usize,
    /// Episodes per update.
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    /// Learner updates between target-network refreshes.
    pub target_update_interval: u64,
    /// Environment steps between greedy evaluation blocks.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    /// Prior used by `ours` when the method does not name one.
    pub prior_mode: PriorMode,
    pub gnn: GnnConfig,
    pub agent_hidden: usize,
    pub mixer_hidden: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2_000_000,
            buffer_capacity: 10_000,
            batch_size: 32,
            lr: 5e-4,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            target_update_interval: 200,
            eval_interval: 10_000,
            eval_episodes: 10,
            seeds: (0..5).collect(),
            prior_mode: PriorMode::Llm,
            gnn: GnnConfig::default(),
            agent_hidden: 64,
            mixer_hidden: 32,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.total_steps == 0 || self.buffer_capacity == 0 || self.batch_size == 0 {
            return bad("total_steps, buffer_capacity and batch_size must be positive");
        }
        if self.batch_size > self.buffer_capacity {
            return bad("batch_size cannot exceed buffer_capacity");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return bad("epsilon values must be in [0, 1]");
            }
        }
        if self.target_update_interval == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("target_update_interval, eval_interval and eval_episodes must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.gnn.layers == 0 || self.gnn.hidden == 0 || self.agent_hidden == 0 || self.mixer_hidden == 0 {
            return bad("network widths and layer count must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        Ok(())
    }

    /// Linear anneal from `epsilon_start` to `epsilon_end`.
    pub fn epsilon(&self, step: u64) -> f64 {
        if self.epsilon_anneal_steps == 0 {
            return self.epsilon_end;
        }
        let frac = (step as f64 / self.epsilon_anneal_steps as f64).min(1.0);
        self.epsilon_start * (1.0 - frac) + self.epsilon_end * frac
    }
}

/// Sizes the learner needs from a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerDims {
    pub n_agents: usize,
    /// Observation length after zero-padding every agent to the longest.
    pub obs_dim: usize,
    pub state_dim: usize,
    pub action_counts: Vec<usize>,
}

impl LearnerDims {
    pub fn from_spec(spec: &ScenarioSpec) -> Self {
        Self {
            n_agents: spec.n_agents,
            obs_dim: spec.max_obs_dim(),
            state_dim: spec.state_dim(),
            action_counts: (0..spec.n_agents).map(|i| spec.action_count(i)).collect(),
        }
    }

    pub fn max_actions(&self) -> usize {
        self.action_counts.iter().copied().max().unwrap_or(0)
    }
}

/// Everything needed to rebuild a parameter set of the right shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub algorithm: Algorithm,
    pub dims: LearnerDims,
    pub gnn: GnnConfig,
    pub agent_hidden: usize,
    pub mixer_hidden: usize,
}

impl Architecture {
    pub fn new(algorithm: Algorithm, dims: LearnerDims, cfg: &TrainConfig) -> Self {
        Self {
            algorithm,
            dims,
            gnn: cfg.gnn,
            agent_hidden: cfg.agent_hidden,
            mixer_hidden: cfg.mixer_hidden,
        }
    }

    fn feature_dim(&self) -> usize {
        if self.algorithm == Algorithm::Ours {
            self.gnn.hidden
        } else {
            self.dims.obs_dim
        }
    }
}

/// Shared per-agent Q-network: `[features | agent one-hot] -> hidden -> Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentNet {
    pub hidden: Linear,
    pub out: Linear,
}

impl Parameters for AgentNet {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.hidden.tensors();
        v.extend(self.out.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.hidden.tensors_mut();
        v.extend(self.out.tensors_mut());
        v
    }
}

/// State-conditioned monotonic mixer. Hypernetwork outputs for the two
/// mixing weights pass through `abs`, so `Q_tot` is non-decreasing in every `Q_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixer {
    pub n_agents: usize,
    pub hidden: usize,
    /// state -> n * hidden first-layer weights
    pub hyper_w1: Linear,
    /// state -> hidden first-layer bias
    pub hyper_b1: Linear,
    /// state -> hidden second-layer weights
    pub hyper_w2: Linear,
    /// two-layer state value used as the final bias
    pub value1: Linear,
    pub value2: Linear,
}

impl Parameters for Mixer {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.hyper_w1.tensors();
        v.extend(self.hyper_b1.tensors());
        v.extend(self.hyper_w2.tensors());
        v.extend(self.value1.tensors());
        v.extend(self.value2.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.hyper_w1.tensors_mut();
        v.extend(self.hyper_b1.tensors_mut());
        v.extend(self.hyper_w2.tensors_mut());
        v.extend(self.value1.tensors_mut());
        v.extend(self.value2.tensors_mut());
        v
    }
}

pub struct MixerTrace {
    state: Matrix,
    qs: Matrix,
    w1_raw: Matrix,
    w2_raw: Matrix,
    hidden_pre: Matrix,
    value_pre: Matrix,
    value_act: Matrix,
}

pub struct MixerGrads {
    pub params: Mixer,
    /// `dLoss/dQ_i`, one row per sample.
    pub qs: Matrix,
}

impl Mixer {
    pub fn new<R: Rng + ?Sized>(n_agents: usize, state_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            n_agents,
            hidden,
            hyper_w1: Linear::init(state_dim, n_agents * hidden, rng),
            hyper_b1: Linear::init(state_dim, hidden, rng),
            hyper_w2: Linear::init(state_dim, hidden, rng),
            value1: Linear::init(state_dim, hidden, rng),
            value2: Linear::init(hidden, 1, rng),
        }
    }

    pub fn zeros(n_agents: usize, state_dim: usize, hidden: usize) -> Self {
        Self {
            n_agents,
            hidden,
            hyper_w1: Linear::zeros(state_dim, n_agents * hidden),
            hyper_b1: Linear::zeros(state_dim, hidden),
            hyper_w2: Linear::zeros(state_dim, hidden),
            value1: Linear::zeros(state_dim, hidden),
            value2: Linear::zeros(hidden, 1),
        }
    }

    /// `Q_tot` for each row of `qs` (B x n) under the matching row of `state` (B x S).
    pub fn forward(&self, qs: &Matrix, state: &Matrix) -> Result<(Vec<f64>, MixerTrace)> {
        let (n, h) = (self.n_agents, self.hidden);
        if qs.cols() != n || qs.rows() != state.rows() {
            return Err(Error::Dimension(format!(
                "mixer over {n} agents got {}x{} utilities for {} states",
                qs.rows(),
                qs.cols(),
                state.rows()
            )));
        }
        let w1_raw = self.hyper_w1.forward(state)?;
        let b1 = self.hyper_b1.forward(state)?;
        let w2_raw = self.hyper_w2.forward(state)?;
        let value_pre = self.value1.forward(state)?;
        let value_act = relu_matrix(&value_pre);
        let value = self.value2.forward(&value_act)?;
        let mut hidden_pre = b1;
        let mut out = Vec::with_capacity(qs.rows());
        for r in 0..qs.rows() {
            let q = qs.row(r);
            let w1 = w1_raw.row(r);
            let hp = hidden_pre.row_mut(r);
            for (i, &qi) in q.iter().enumerate() {
                for k in 0..h {
                    hp[k] += qi * w1[i * h + k].abs();
                }
            }
            let w2 = w2_raw.row(r);
            let mut total = value.get(r, 0);
            for k in 0..h {
                total += elu(hp[k]) * w2[k].abs();
            }
            out.push(total);
        }
        Ok((
            out,
            MixerTrace {
                state: state.clone(),
                qs: qs.clone(),
                w1_raw,
                w2_raw,
                hidden_pre,
                value_pre,
                value_act,
            },
        ))
    }

    /// Gradients given `upstream[r] = dLoss/dQ_tot` for each sample.
    pub fn backward(&self, trace: &MixerTrace, upstream: &[f64]) -> Result<MixerGrads> {
        let (n, h) = (self.n_agents, self.hidden);
        let rows = trace.qs.rows();
        if upstream.len() != rows {
            return Err(Error::Dimension(format!(
                "mixer backward got {} upstream values for {rows} samples",
                upstream.len()
            )));
        }
        let mut d_w1 = Matrix::zeros(rows, n * h);
        let mut d_b1 = Matrix::zeros(rows, h);
        let mut d_w2 = Matrix::zeros(rows, h);
        let mut d_value = Matrix::zeros(rows, 1);
        let mut d_qs = Matrix::zeros(rows, n);
        for r in 0..rows {
            let g = upstream[r];
            d_value.set(r, 0, g);
            let hp = trace.hidden_pre.row(r);
            let w1 = trace.w1_raw.row(r);
            let w2 = trace.w2_raw.row(r);
            let q = trace.qs.row(r);
            let dh: Vec<f64> = (0..h)
                .map(|k| {
                    d_w2.set(r, k, g * elu(hp[k]) * sign(w2[k]));
                    g * w2[k].abs() * elu_grad(hp[k])
                })
                .collect();
            d_b1.row_mut(r).copy_from_slice(&dh);
            let dw1 = d_w1.row_mut(r);
            let dq = d_qs.row_mut(r);
            for i in 0..n {
                let mut acc = 0.0;
                for k in 0..h {
                    let w = w1[i * h + k];
                    dw1[i * h + k] = q[i] * dh[k] * sign(w);
                    acc += dh[k] * w.abs();
                }
                dq[i] = acc;
            }
        }
        let gw1 = self.hyper_w1.backward(&trace.state, &d_w1)?;
        let gb1 = self.hyper_b1.backward(&trace.state, &d_b1)?;
        let gw2 = self.hyper_w2.backward(&trace.state, &d_w2)?;
        let gv2 = self.value2.backward(&trace.value_act, &d_value)?;
        let mut d_vact = gv2.input.clone();
        relu_backward_matrix(&trace.value_pre, &mut d_vact);
        let gv1 = self.value1.backward(&trace.state, &d_vact)?;
        let lin = |g: crate::numeric::LinearGrads| Linear {
            weight: g.weight,
            bias: g.bias,
        };
        Ok(MixerGrads {
            params: Mixer {
                n_agents: n,
                hidden: h,
                hyper_w1: lin(gw1),
                hyper_b1: lin(gb1),
                hyper_w2: lin(gw2),
                value1: lin(gv1),
                value2: lin(gv2),
            },
            qs: d_qs,
        })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Additive decomposition: the plain sum of the chosen utilities.
pub fn vdn_total(qs: &[f64]) -> f64 {
    qs.iter().sum()
}

/// All trainable tensors of one learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerParams {
    pub gnn: Option<GnnParams>,
    pub agent: AgentNet,
    pub mixer: Option<Mixer>,
}

impl Parameters for LearnerParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = Vec::new();
        if let Some(g) = &self.gnn {
            v.extend(g.tensors());
        }
        v.extend(self.agent.tensors());
        if let Some(m) = &self.mixer {
            v.extend(m.tensors());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = Vec::new();
        if let Some(g) = &mut self.gnn {
            v.extend(g.tensors_mut());
        }
        v.extend(self.agent.tensors_mut());
        if let Some(m) = &mut self.mixer {
            v.extend(m.tensors_mut());
        }
        v
    }
}

impl LearnerParams {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let d = &arch.dims;
        let gnn = match arch.algorithm {
            Algorithm::Ours => Some(GnnParams::new(d.obs_dim, arch.gnn, rng)?),
            _ => None,
        };
        let input = arch.feature_dim() + d.n_agents;
        let agent = AgentNet {
            hidden: Linear::init(input, arch.agent_hidden, rng),
            out: Linear::init(arch.agent_hidden, d.max_actions(), rng),
        };
        let mixer = arch
            .algorithm
            .uses_mixer()
            .then(|| Mixer::new(d.n_agents, d.state_dim, arch.mixer_hidden, rng));
        Ok(Self { gnn, agent, mixer })
    }

    /// Same shapes as [`LearnerParams::new`], every entry zero.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Self::new(arch, &mut rng)?;
        Ok(p.zero_like())
    }
}

/// Per-agent Q-values for a stack of joint observations.
pub struct QTrace {
    gnn: Option<GnnForwardTrace>,
    input: Matrix,
    hidden_pre: Matrix,
    hidden_act: Matrix,
    feature_dim: usize,
}

/// `obs` stacks `graphs * n` padded observation rows, graph-major.
/// `adjacency` holds one prior per graph and is only read by the graph learner.
pub fn agent_q_values(
    params: &LearnerParams,
    obs: &Matrix,
    adjacency: &[Matrix],
    n_agents: usize,
) -> Result<(Matrix, QTrace)> {
    if obs.rows() % n_agents != 0 {
        return Err(Error::Dimension(format!(
            "{} observation rows are not a whole number of {n_agents}-agent teams",
            obs.rows()
        )));
    }
    let (features, gnn_trace) = match &params.gnn {
        Some(g) => {
            let (h, t) = gnn_forward_batch(obs, adjacency, g)?;
            (h, Some(t))
        }
        None => (obs.clone(), None),
    };
    let f = features.cols();
    let mut input = Matrix::zeros(features.rows(), f + n_agents);
    for r in 0..features.rows() {
        let row = input.row_mut(r);
        row[..f].copy_from_slice(features.row(r));
        row[f + r % n_agents] = 1.0;
    }
    let hidden_pre = params.agent.hidden.forward(&input)?;
    let hidden_act = relu_matrix(&hidden_pre);
    let q = params.agent.out.forward(&hidden_act)?;
    Ok((
        q,
        QTrace {
            gnn: gnn_trace,
            input,
            hidden_pre,
            hidden_act,
            feature_dim: f,
        },
    ))
}

fn agent_backward(params: &LearnerParams, trace: &QTrace, d_q: &Matrix) -> Result<(Option<GnnParams>, AgentNet)> {
    let g_out = params.agent.out.backward(&trace.hidden_act, d_q)?;
    let mut d_hidden = g_out.input;
    relu_backward_matrix(&trace.hidden_pre, &mut d_hidden);
    let g_hidden = params.agent.hidden.backward(&trace.input, &d_hidden)?;
    let agent = AgentNet {
        hidden: Linear {
            weight: g_hidden.weight,
            bias: g_hidden.bias,
        },
        out: Linear {
            weight: g_out.weight,
            bias: g_out.bias,
        },
    };
    let gnn = match (&params.gnn, &trace.gnn) {
        (Some(g), Some(t)) => {
            let f = trace.feature_dim;
            let rows = g_hidden.input.rows();
            let mut upstream = Matrix::zeros(rows, f);
            for r in 0..rows {
                upstream.row_mut(r).copy_from_slice(&g_hidden.input.row(r)[..f]);
            }
            Some(gnn_backward(t, g, &upstream)?.params)
        }
        _ => None,
    };
    Ok((gnn, agent))
}

/// Highest-valued available action; ties go to the lowest index.
pub fn greedy_action(q: &[f64], available: usize) -> usize {
    let mut best = 0;
    for a in 1..available.min(q.len()) {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

/// Pads each agent's observation with zeros to `width` and stacks them.
pub fn stack_observations(observations: &[AgentObservation], width: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(observations.len(), width);
    for (i, o) in observations.iter().enumerate() {
        if o.values.len() > width {
            return Err(Error::Dimension(format!(
                "observation of length {} exceeds padded width {width}",
                o.values.len()
            )));
        }
        m.row_mut(i)[..o.values.len()].copy_from_slice(&o.values);
    }
    Ok(m)
}

/// Epsilon-greedy joint action. One uniform draw per agent decides between
/// exploring and acting greedily on that agent's Q-head.
pub fn select_actions<R: Rng + ?Sized>(
    params: &LearnerParams,
    dims: &LearnerDims,
    obs: &Matrix,
    adjacency: &Matrix,
    epsilon: f64,
    rng: &mut R,
) -> Result<JointAction> {
    let n = dims.n_agents;
    let mut actions = vec![usize::MAX; n];
    for (i, a) in actions.iter_mut().enumerate() {
        if rng.random::<f64>() < epsilon {
            *a = rng.random_range(0..dims.action_counts[i]);
        }
    }
    if actions.iter().any(|&a| a == usize::MAX) {
        let (q, _) = agent_q_values(params, obs, std::slice::from_ref(adjacency), n)?;
        for (i, a) in actions.iter_mut().enumerate() {
            if *a == usize::MAX {
                *a = greedy_action(q.row(i), dims.action_counts[i]);
            }
        }
    }
    Ok(JointAction(actions))
}

/// One stored episode. Observations and states cover `T + 1` time points so
/// the last transition can bootstrap after a step-limit truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// `(T + 1) * n * obs_dim`, time-major then agent.
    pub observations: Vec<f64>,
    /// `(T + 1) * state_dim`
    pub states: Vec<f64>,
    /// `T * n`
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// The episode ended in a scenario-terminal (absorbing) state.
    pub terminated: bool,
    pub prior: Matrix,
    pub prior_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub episode: u64,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_observations: Vec<Vec<f64>>,
    pub done: bool,
    /// Absorbing end; when false a final transition still bootstraps.
    pub terminal: bool,
    pub state: Vec<f64>,
    pub next_state: Vec<f64>,
}

impl Episode {
    pub fn new(id: u64, dims: &LearnerDims, prior: Matrix, prior_fallback: bool) -> Self {
        Self {
            id,
            n_agents: dims.n_agents,
            obs_dim: dims.obs_dim,
            state_dim: dims.state_dim,
            observations: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: false,
            prior,
            prior_fallback,
        }
    }

    /// Appends the observation and state at the next time point.
    pub fn push_point(&mut self, obs: &Matrix, state: &[f64]) -> Result<()> {
        if obs.shape() != (self.n_agents, self.obs_dim) || state.len() != self.state_dim {
            return Err(Error::Dimension(format!(
                "episode expects {}x{} observations and a state of {}, got {}x{} and {}",
                self.n_agents,
                self.obs_dim,
                self.state_dim,
                obs.rows(),
                obs.cols(),
                state.len()
            )));
        }
        self.observations.extend_from_slice(obs.data());
        self.states.extend_from_slice(state);
        Ok(())
    }

    pub fn push_step(&mut self, actions: &[usize], reward: f64) {
        self.actions.extend_from_slice(actions);
        self.rewards.push(reward);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn points(&self) -> usize {
        self.states.len() / self.state_dim.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let ok = t > 0
            && self.points() == t + 1
            && self.observations.len() == (t + 1) * self.n_agents * self.obs_dim
            && self.states.len() == (t + 1) * self.state_dim
            && self.actions.len() == t * self.n_agents
            && self.prior.shape() == (self.n_agents, self.n_agents);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("episode {} is incomplete or inconsistent", self.id)))
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn obs_at(&self, t: usize) -> &[f64] {
        let w = self.n_agents * self.obs_dim;
        &self.observations[t * w..(t + 1) * w]
    }

    fn state_at(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn transition(&self, t: usize) -> Transition {
        let split = |flat: &[f64]| flat.chunks(self.obs_dim).map(<[f64]>::to_vec).collect();
        let last = t + 1 == self.len();
        Transition {
            episode: self.id,
            observations: split(self.obs_at(t)),
            actions: self.actions[t * self.n_agents..(t + 1) * self.n_agents].to_vec(),
            reward: self.rewards[t],
            next_observations: split(self.obs_at(t + 1)),
            done: last,
            terminal: last && self.terminated,
            state: self.state_at(t).to_vec(),
            next_state: self.state_at(t + 1).to_vec(),
        }
    }
}

/// Ring buffer of whole episodes; the oldest is evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            episodes: VecDeque::with_capacity(capacity.min(1024)),
        }
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    /// `count` distinct episodes, or `None` if the buffer holds fewer.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Option<Vec<&Episode>> {
        if count == 0 || self.episodes.len() < count {
            return None;
        }
        Some(
            sample(rng, self.episodes.len(), count)
                .into_iter()
                .map(|i| &self.episodes[i])
                .collect(),
        )
    }
}

/// TD loss over a batch of episodes and its gradient for every online parameter.
///
/// The prior stored with each episode feeds both the online and target passes.
pub fn loss_and_grads(
    params: &LearnerParams,
    target: &LearnerParams,
    batch: &[&Episode],
    dims: &LearnerDims,
    algorithm: Algorithm,
    gamma: f64,
) -> Result<(f64, LearnerParams)> {
    let n = dims.n_agents;
    let max_a = dims.max_actions();
    let mut obs = Vec::new();
    let mut adjacency = Vec::new();
    let mut offsets = Vec::with_capacity(batch.len());
    let mut graphs = 0;
    for ep in batch {
        ep.validate()?;
        if ep.n_agents != n || ep.obs_dim != dims.obs_dim || ep.state_dim != dims.state_dim {
            return Err(Error::Dimension(format!("episode {} does not match the learner", ep.id)));
        }
        offsets.push(graphs);
        obs.extend_from_slice(&ep.observations);
        for _ in 0..ep.points() {
            adjacency.push(ep.prior.clone());
        }
        graphs += ep.points();
    }
    let obs = Matrix::from_vec(graphs * n, dims.obs_dim, obs)?;
    let (q, trace) = agent_q_values(params, &obs, &adjacency, n)?;
    let (q_target, _) = agent_q_values(target, &obs, &adjacency, n)?;

    let transitions: usize = batch.iter().map(|e| e.len()).sum();
    let mut chosen = Matrix::zeros(transitions, n);
    let mut next = Matrix::zeros(transitions, n);
    let mut states = Matrix::zeros(transitions, dims.state_dim);
    let mut next_states = Matrix::zeros(transitions, dims.state_dim);
    let mut rewards = Vec::with_capacity(transitions);
    let mut continues = Vec::with_capacity(transitions);
    let mut rows = Vec::with_capacity(transitions);
    for (ep, &base) in batch.iter().zip(&offsets) {
        for t in 0..ep.len() {
            let r = rewards.len();
            let g = base + t;
            for i in 0..n {
                let a = ep.actions[t * n + i];
                chosen.set(r, i, q.get(g * n + i, a));
                let next_row = (g + 1) * n + i;
                let a_next = greedy_action(q.row(next_row), dims.action_counts[i]);
                next.set(r, i, q_target.get(next_row, a_next));
            }
            states.row_mut(r).copy_from_slice(ep.state_at(t));
            next_states.row_mut(r).copy_from_slice(ep.state_at(t + 1));
            rewards.push(ep.rewards[t]);
            let terminal = t + 1 == ep.len() && ep.terminated;
            continues.push(if terminal { 0.0 } else { 1.0 });
            rows.push(g);
        }
    }

    let mut d_q = Matrix::zeros(graphs * n, max_a);
    let mut grads = params.zero_like();
    let b = transitions as f64;
    let loss = match (algorithm, &params.mixer, &target.mixer) {
        (Algorithm::Qmix | Algorithm::Ours, Some(mixer), Some(target_mixer)) => {
            let (q_tot, mtrace) = mixer.forward(&chosen, &states)?;
            let (q_next, _) = target_mixer.forward(&next, &next_states)?;
            let mut upstream = Vec::with_capacity(transitions);
            let mut total = 0.0;
            for r in 0..transitions {
                let y = rewards[r] + gamma * continues[r] * q_next[r];
                let delta = q_tot[r] - y;
                total += delta * delta;
                upstream.push(2.0 * delta / b);
            }
            let mg = mixer.backward(&mtrace, &upstream)?;
            grads.mixer = Some(mg.params);
            scatter(&mut d_q, &mg.qs, batch, &rows, n);
            total / b
        }
        (Algorithm::Vdn, None, None) => {
            let mut d_chosen = Matrix::zeros(transitions, n);
            let mut total = 0.0;
            for r in 0..transitions {
                let y = rewards[r] + gamma * continues[r] * vdn_total(next.row(r));
                let delta = vdn_total(chosen.row(r)) - y;
                total += delta * delta;
                d_chosen.row_mut(r).fill(2.0 * delta / b);
            }
            scatter(&mut d_q, &d_chosen, batch, &rows, n);
            total / b
        }
        (Algorithm::Iql, None, None) => {
            // every agent regresses on its own target; mean over agents and samples
            let count = b * n as f64;
            let mut d_chosen = Matrix::zeros(transitions, n);
            let mut total = 0.0;
            for r in 0..transitions {
                for i in 0..n {
                    let y = rewards[r] + gamma * continues[r] * next.get(r, i);
                    let delta = chosen.get(r, i) - y;
                    total += delta * delta;
                    d_chosen.set(r, i, 2.0 * delta / count);
                }
            }
            scatter(&mut d_q, &d_chosen, batch, &rows, n);
            total / count
        }
        _ => {
            return Err(Error::Invalid(format!(
                "parameter layout does not match the {algorithm} learner"
            )))
        }
    };
    let (gnn_grads, agent_grads) = agent_backward(params, &trace, &d_q)?;
    grads.agent = agent_grads;
    grads.gnn = gnn_grads;
    Ok((loss, grads))
}

/// Routes per-transition utility gradients to the Q-value of the action taken.
fn scatter(d_q: &mut Matrix, d_chosen: &Matrix, batch: &[&Episode], rows: &[usize], n: usize) {
    let mut r = 0;
    for ep in batch {
        for t in 0..ep.len() {
            let g = rows[r];
            for i in 0..n {
                let a = ep.actions[t * n + i];
                let cell = d_q.get(g * n + i, a) + d_chosen.get(r, i);
                d_q.set(g * n + i, a, cell);
            }
            r += 1;
        }
    }
}

/// Online and target parameters with their optimizer.
#[derive(Debug, Clone)]
pub struct Learner {
    pub arch: Architecture,
    pub params: LearnerParams,
    pub target: LearnerParams,
    optimizer: Adam,
    gamma: f64,
    grad_clip: f64,
    target_update_interval: u64,
    updates: u64,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let params = LearnerParams::new(&arch, rng)?;
        Ok(Self::from_params(arch, params, cfg))
    }

    pub fn from_params(arch: Architecture, params: LearnerParams, cfg: &TrainConfig) -> Self {
        let optimizer = Adam::new(
            &params,
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        );
        Self {
            arch,
            target: params.clone(),
            params,
            optimizer,
            gamma: cfg.gamma,
            grad_clip: cfg.grad_clip,
            target_update_interval: cfg.target_update_interval,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// One clipped Adam step on the TD loss of `batch`; refreshes the target
    /// network every `target_update_interval` updates. Returns the loss.
    pub fn td_update(&mut self, batch: &[&Episode]) -> Result<f64> {
        let (loss, mut grads) = loss_and_grads(
            &self.params,
            &self.target,
            batch,
            &self.arch.dims,
            self.arch.algorithm,
            self.gamma,
        )?;
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("TD loss diverged to {loss}")));
        }
        if self.grad_clip > 0.0 {
            grads.clip_global_norm(self.grad_clip);
        }
        self.optimizer.step(&mut self.params, &grads)?;
        self.updates += 1;
        if self.updates % self.target_update_interval == 0 {
            self.sync_target();
        }
        Ok(loss)
    }

    /// Samples a batch and updates; `Ok(None)` while the buffer is too small.
    pub fn update_from<R: Rng + ?Sized>(
        &mut self,
        buffer: &ReplayBuffer,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        match buffer.sample(batch_size, rng) {
            Some(batch) => self.td_update(&batch).map(Some),
            None => Ok(None),
        }
    }

    pub fn sync_target(&mut self) {
        self.target = self.params.clone();
    }
}

enum ClientRef<'a> {
    None,
    Borrowed(&'a PriorClient),
    Owned(PriorClient),
}

/// Produces the coordination prior for each episode according to a [`PriorMode`].
pub struct PriorSource<'a> {
    mode: PriorMode,
    client: ClientRef<'a>,
    templates: &'a TemplateSet,
}

impl<'a> PriorSource<'a> {
    /// `llm` mode requires a client; the other modes ignore it.
    pub fn new(mode: PriorMode, client: Option<&'a PriorClient>, templates: &'a TemplateSet) -> Result<Self> {
        let client = match (mode, client) {
            (PriorMode::Llm, Some(c)) => ClientRef::Borrowed(c),
            (PriorMode::Llm, None) => {
                return Err(Error::Usage("llm prior mode needs a configured provider".into()))
            }
            (PriorMode::MockHeuristic, _) => ClientRef::Owned(PriorClient::new(Box::new(MockHeuristic), None, 0)),
            _ => ClientRef::None,
        };
        Ok(Self {
            mode,
            client,
            templates,
        })
    }

    pub fn mode(&self) -> PriorMode {
        self.mode
    }

    /// `None` when the learner ignores priors.
    pub fn prior(&self, observations: &[AgentObservation], spec: &ScenarioSpec) -> Option<GraphPrior> {
        let client = match &self.client {
            ClientRef::Borrowed(c) => *c,
            ClientRef::Owned(c) => c,
            ClientRef::None => {
                return match self.mode {
                    PriorMode::Uniform => Some(GraphPrior::uniform(spec.n_agents)),
                    _ => None,
                }
            }
        };
        Some(prior_for_episode(observations, spec, client, self.templates))
    }
}

/// Plays one episode. `epsilon = 0` gives greedy evaluation.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    arch: &Architecture,
    params: &LearnerParams,
    priors: &PriorSource<'_>,
    env_seed: u64,
    episode_id: u64,
    epsilon: impl Fn(usize) -> f64,
    rng: &mut R,
) -> Result<Episode> {
    let dims = &arch.dims;
    let (mut state, mut obs) = env::reset(spec, env_seed)?;
    let (prior, fallback) = match priors.prior(&obs, spec) {
        Some(p) => (p.matrix, p.provenance.fallback),
        None => (Matrix::identity(spec.n_agents), false),
    };
    let mut episode = Episode::new(episode_id, dims, prior, fallback);
    let mut stacked = stack_observations(&obs, dims.obs_dim)?;
    episode.push_point(&stacked, &env::global_state(spec, &state))?;
    loop {
        let actions = select_actions(params, dims, &stacked, &episode.prior, epsilon(episode.len()), rng)?;
        let result = env::step(spec, &state, &actions)?;
        episode.push_step(&actions.0, result.reward);
        state = result.state;
        obs = result.observations;
        stacked = stack_observations(&obs, dims.obs_dim)?;
        episode.push_point(&stacked, &env::global_state(spec, &state))?;
        if result.done {
            episode.terminated = result.terminated;
            return Ok(episode);
        }
    }
}

/// Deterministic list of environment seeds for a block of episodes.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| rng.random::<u64>()).collect()
}

/// Greedy return of one episode per environment seed.
pub fn evaluate<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    arch: &Architecture,
    params: &LearnerParams,
    priors: &PriorSource<'_>,
    env_seeds: &[u64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    env_seeds
        .iter()
        .enumerate()
        .map(|(k, &env_seed)| {
            rollout(spec, arch, params, priors, env_seed, k as u64, |_| 0.0, rng).map(|e| e.total_reward())
        })
        .collect()
}

/// Greedy returns over `episodes` episodes whose start states match
/// [`random_policy_returns`] for the same `seed`.
pub fn evaluate_seeded(
    spec: &ScenarioSpec,
    arch: &Architecture,
    params: &LearnerParams,
    priors: &PriorSource<'_>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ACTION_STREAM);
    evaluate(spec, arch, params, priors, &episode_seeds(seed, episodes), &mut rng)
}

/// Return of a uniformly random policy on each environment seed.
pub fn random_policy_on<R: Rng + ?Sized>(spec: &ScenarioSpec, env_seeds: &[u64], rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(env_seeds.len());
    for &env_seed in env_seeds {
        let (mut state, _) = env::reset(spec, env_seed)?;
        let mut total = 0.0;
        loop {
            let actions = (0..spec.n_agents)
                .map(|i| rng.random_range(0..spec.action_count(i)))
                .collect();
            let r = env::step(spec, &state, &JointAction(actions))?;
            total += r.reward;
            state = r.state;
            if r.done {
                break;
            }
        }
        out.push(total);
    }
    Ok(out)
}

/// Random-policy returns over `episodes` episodes whose start states match
/// [`episode_seeds`] for the same `seed`.
pub fn random_policy_returns(spec: &ScenarioSpec, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ACTION_STREAM);
    random_policy_on(spec, &episode_seeds(seed, episodes), &mut rng)
}

/// Separates action randomness from start-state randomness.
const ACTION_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub episode: u64,
    pub mean_eval_return: f64,
    /// Mean TD loss since the previous row; NaN before learning starts.
    pub loss: f64,
    pub epsilon: f64,
    /// Share of training episodes so far whose prior was the fallback.
    pub fallback_rate: f64,
}

pub const LOG_HEADER: &str = "step,episode,mean_eval_return,loss,epsilon,fallback_rate";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.episode, r.mean_eval_return, r.loss, r.epsilon, r.fallback_rate
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == LOG_HEADER => {}
            _ => {
                return Err(Error::Config {
                    line: 1,
                    message: format!("expected header '{LOG_HEADER}'"),
                })
            }
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: String| Error::Config {
                line: idx + 1,
                message: m,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| err(format!("'{s}': {e}")));
            let int = |s: &str| s.trim().parse::<u64>().map_err(|e| err(format!("'{s}': {e}")));
            rows.push(LogRow {
                step: int(f[0])?,
                episode: int(f[1])?,
                mean_eval_return: num(f[2])?,
                loss: num(f[3])?,
                epsilon: num(f[4])?,
                fallback_rate: num(f[5])?,
            });
        }
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean greedy return of the last evaluation block.
    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_eval_return)
    }
}

pub struct TrainOutcome {
    pub log: TrainingLog,
    pub learner: Learner,
    pub method: Method,
    pub env_steps: u64,
    pub episodes: u64,
    pub fallback_episodes: u64,
}

impl TrainOutcome {
    pub fn final_return(&self) -> f64 {
        self.log.final_return().unwrap_or(f64::NAN)
    }

    pub fn checkpoint(&self, spec: &ScenarioSpec) -> Checkpoint {
        Checkpoint {
            method: self.method,
            spec: spec.clone(),
            arch: self.learner.arch.clone(),
            params: self.learner.params.clone(),
        }
    }
}

/// Full training run for one seed: rollouts with annealed exploration, one
/// update per episode once the buffer holds a batch, and a greedy evaluation
/// block every `eval_interval` steps plus one at the end.
pub fn run_training(
    spec: &ScenarioSpec,
    cfg: &TrainConfig,
    method: Method,
    client: Option<&PriorClient>,
    templates: &TemplateSet,
    seed: u64,
) -> Result<TrainOutcome> {
    spec.validate()?;
    cfg.validate()?;
    method.validate()?;
    let priors = PriorSource::new(method.prior, client, templates)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E7A1_u64);
    let arch = Architecture::new(method.algorithm, LearnerDims::from_spec(spec), cfg);
    let mut learner = Learner::new(arch, cfg, &mut rng)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut log = TrainingLog::default();
    let (mut steps, mut episodes, mut fallbacks) = (0u64, 0u64, 0u64);
    let mut losses = Vec::new();
    let mut next_eval = cfg.eval_interval;
    while steps < cfg.total_steps {
        let env_seed = rng.random::<u64>();
        let start = steps;
        let episode = rollout(
            spec,
            &learner.arch,
            &learner.params,
            &priors,
            env_seed,
            episodes,
            |t| cfg.epsilon(start + t as u64),
            &mut rng,
        )?;
        steps += episode.len() as u64;
        episodes += 1;
        fallbacks += u64::from(episode.prior_fallback);
        buffer.push(episode);
        if let Some(loss) = learner.update_from(&buffer, cfg.batch_size, &mut rng)? {
            losses.push(loss);
        }
        let last = steps >= cfg.total_steps;
        if steps >= next_eval || last {
            while next_eval <= steps {
                next_eval += cfg.eval_interval;
            }
            let seeds: Vec<u64> = (0..cfg.eval_episodes).map(|_| eval_rng.random::<u64>()).collect();
            let returns = evaluate(spec, &learner.arch, &learner.params, &priors, &seeds, &mut eval_rng)?;
            let row = LogRow {
                step: steps,
                episode: episodes,
                mean_eval_return: mean(&returns),
                loss: mean(&losses),
                epsilon: cfg.epsilon(steps),
                fallback_rate: fallbacks as f64 / episodes as f64,
            };
            log::info!(
                "{} {} seed {seed}: step {} return {:.3} loss {:.4}",
                spec.scenario,
                method,
                row.step,
                row.mean_eval_return,
                row.loss
            );
            log.rows.push(row);
            losses.clear();
        }
    }
    Ok(TrainOutcome {
        log,
        learner,
        method,
        env_steps: steps,
        episodes,
        fallback_episodes: fallbacks,
    })
}

const CHECKPOINT_MAGIC: &str = "coordprior-checkpoint v1";

/// Trained parameters plus what is needed to rebuild and run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub spec: ScenarioSpec,
    pub arch: Architecture,
    pub params: LearnerParams,
}

impl Checkpoint {
    /// Plain-text record: a JSON metadata line, then one `tensor rows cols`
    /// header per matrix followed by its values in shortest round-trip form.
    pub fn to_text(&self) -> Result<String> {
        let meta = serde_json::json!({
            "method": self.method,
            "spec": self.spec,
            "arch": self.arch,
        });
        let mut out = format!("{CHECKPOINT_MAGIC}\n{meta}\n");
        for t in self.params.tensors() {
            out.push_str(&format!("tensor {} {}\n", t.rows(), t.cols()));
            let values: Vec<String> = t.data().iter().map(|x| format!("{x:e}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::Config {
            line,
            message: m.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(1, "not a checkpoint file"));
        }
        let meta: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| bad(2, "missing metadata"))?)
            .map_err(|e| bad(2, &e.to_string()))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(2, &format!("metadata lacks '{k}'")));
        let method: Method = serde_json::from_value(field("method")?).map_err(|e| bad(2, &e.to_string()))?;
        let spec: ScenarioSpec = serde_json::from_value(field("spec")?).map_err(|e| bad(2, &e.to_string()))?;
        let arch: Architecture = serde_json::from_value(field("arch")?).map_err(|e| bad(2, &e.to_string()))?;
        let mut params = LearnerParams::zeros(&arch)?;
        let mut line_no = 2;
        for t in params.tensors_mut() {
            line_no += 1;
            let header = lines.next().ok_or_else(|| bad(line_no, "missing tensor header"))?;
            let dims: Vec<&str> = header.split_whitespace().collect();
            let shape = match dims.as_slice() {
                ["tensor", r, c] => (
                    r.parse::<usize>().map_err(|e| bad(line_no, &e.to_string()))?,
                    c.parse::<usize>().map_err(|e| bad(line_no, &e.to_string()))?,
                ),
                _ => return Err(bad(line_no, "malformed tensor header")),
            };
            if shape != t.shape() {
                return Err(bad(
                    line_no,
                    &format!("tensor is {}x{}, architecture expects {}x{}", shape.0, shape.1, t.rows(), t.cols()),
                ));
            }
            line_no += 1;
            let values = lines.next().unwrap_or("");
            let parsed = values
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(line_no, &e.to_string()))?;
            if parsed.len() != t.data().len() || parsed.iter().any(|x| !x.is_finite()) {
                return Err(bad(line_no, "wrong number of values or non-finite value"));
            }
            t.data_mut().copy_from_slice(&parsed);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad(line_no + 1, "trailing data after the last tensor"));
        }
        Ok(Self {
            method,
            spec,
            arch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_text(&text).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// A freshly initialised, untrained checkpoint.
    pub fn fresh(spec: &ScenarioSpec, method: Method, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(method.algorithm, LearnerDims::from_spec(spec), cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = LearnerParams::new(&arch, &mut rng)?;
        Ok(Self {
            method,
            spec: spec.clone(),
            arch,
            params,
        })
    }
}
