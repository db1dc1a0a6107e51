//! Particle-world cooperative scenarios with discrete actions and a shared reward.
//!
//! Dynamics follow the usual particle-environment conventions: forces from
//! actions and soft contacts, velocity damping, semi-implicit Euler
//! integration. All randomness comes from the seed handed to [`reset`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

/// Number of discrete movement actions: no-op, +x, -x, +y, -y.
pub const MOVE_ACTIONS: usize = 5;

pub const ACTION_NOOP: usize = 0;
pub const ACTION_POS_X: usize = 1;
pub const ACTION_NEG_X: usize = 2;
pub const ACTION_POS_Y: usize = 3;
pub const ACTION_NEG_Y: usize = 4;

/// Extra gap within which an agent still counts as touching the pushable object.
const PUSH_CONTACT_SLACK: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    SpeakerListener,
    Reference,
    CooperativePush,
    Adversary,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 4] = [
        ScenarioId::SpeakerListener,
        ScenarioId::Reference,
        ScenarioId::CooperativePush,
        ScenarioId::Adversary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::SpeakerListener => "speaker_listener",
            ScenarioId::Reference => "reference",
            ScenarioId::CooperativePush => "cooperative_push",
            ScenarioId::Adversary => "adversary",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown scenario '{s}'")))
    }
}

/// Functional role of an agent, used by the description templates and the
/// heuristic prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Speaker,
    Listener,
    Navigator,
    Pusher,
    Evader,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Speaker => "speaker",
            Role::Listener => "listener",
            Role::Navigator => "navigator",
            Role::Pusher => "pusher",
            Role::Evader => "evader",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Physics {
    pub dt: f64,
    pub damping: f64,
    /// Force produced by one unit of movement action.
    pub action_force: f64,
    pub contact_force: f64,
    pub contact_margin: f64,
    pub agent_radius: f64,
    pub agent_mass: f64,
    pub landmark_radius: f64,
    pub object_radius: f64,
    pub object_mass: f64,
    /// The pushable object only moves when the summed push exceeds this
    /// multiple of `action_force`.
    pub push_threshold: f64,
    pub adversary_radius: f64,
    /// Distance at which an agent counts as having reached a target landmark.
    pub arrival_radius: f64,
    /// Quadratic penalty applies to coordinates beyond this magnitude.
    pub boundary: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            dt: 0.1,
            damping: 0.25,
            action_force: 1.0,
            contact_force: 100.0,
            contact_margin: 1e-3,
            agent_radius: 0.05,
            agent_mass: 1.0,
            landmark_radius: 0.04,
            object_radius: 0.15,
            object_mass: 2.0,
            push_threshold: 1.5,
            adversary_radius: 0.075,
            arrival_radius: 0.1,
            boundary: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: ScenarioId,
    pub n_agents: usize,
    pub n_landmarks: usize,
    pub t_max: usize,
    pub physics: Physics,
}

impl ScenarioSpec {
    /// Default team size, landmark count and episode length for a scenario.
    pub fn new(scenario: ScenarioId) -> Self {
        let (n_agents, n_landmarks) = match scenario {
            ScenarioId::SpeakerListener | ScenarioId::Reference => (2, 3),
            ScenarioId::CooperativePush | ScenarioId::Adversary => (3, 1),
        };
        Self {
            scenario,
            n_agents,
            n_landmarks,
            t_max: 25,
            physics: Physics::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.physics;
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_agents < 2 {
            return bad(format!("scenario needs at least 2 agents, got {}", self.n_agents));
        }
        if self.t_max < 1 {
            return bad("t_max must be at least 1".into());
        }
        if !(p.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", p.dt));
        }
        if !(0.0..1.0).contains(&p.damping) {
            return bad(format!("damping must be in [0, 1), got {}", p.damping));
        }
        let positive = [
            p.agent_radius,
            p.agent_mass,
            p.landmark_radius,
            p.object_radius,
            p.object_mass,
            p.adversary_radius,
        ];
        if positive.iter().any(|&x| !(x > 0.0)) {
            return bad("radii and masses must be positive".into());
        }
        match self.scenario {
            ScenarioId::SpeakerListener | ScenarioId::Reference if self.n_agents != 2 => {
                bad(format!("{} is a two-agent scenario", self.scenario))
            }
            ScenarioId::SpeakerListener | ScenarioId::Reference if self.n_landmarks < 2 => {
                bad(format!("{} needs at least 2 landmarks", self.scenario))
            }
            ScenarioId::CooperativePush | ScenarioId::Adversary if self.n_landmarks != 1 => {
                bad(format!("{} uses exactly one target landmark", self.scenario))
            }
            _ => Ok(()),
        }
    }

    pub fn role(&self, agent: usize) -> Role {
        match self.scenario {
            ScenarioId::SpeakerListener if agent == 0 => Role::Speaker,
            ScenarioId::SpeakerListener => Role::Listener,
            ScenarioId::Reference => Role::Navigator,
            ScenarioId::CooperativePush => Role::Pusher,
            ScenarioId::Adversary => Role::Evader,
        }
    }

    pub fn roles(&self) -> Vec<Role> {
        (0..self.n_agents).map(|i| self.role(i)).collect()
    }

    /// Size of the discrete action space of `agent`.
    pub fn action_count(&self, agent: usize) -> usize {
        match self.role(agent) {
            Role::Speaker => self.n_landmarks,
            _ => MOVE_ACTIONS,
        }
    }

    pub fn max_action_count(&self) -> usize {
        (0..self.n_agents)
            .map(|i| self.action_count(i))
            .max()
            .unwrap_or(MOVE_ACTIONS)
    }

    /// Length of agent `agent`'s observation vector.
    pub fn obs_dim(&self, agent: usize) -> usize {
        let l = self.n_landmarks;
        let teammates = 2 * (self.n_agents - 1);
        match self.role(agent) {
            Role::Speaker => l,
            Role::Listener => 2 + 2 * l + l,
            Role::Navigator => 2 + 2 * l + 2 + l,
            Role::Pusher => 2 + 2 + 2 + teammates,
            Role::Evader => 2 + 2 + 2 + teammates,
        }
    }

    pub fn max_obs_dim(&self) -> usize {
        (0..self.n_agents).map(|i| self.obs_dim(i)).max().unwrap_or(0)
    }

    pub fn state_dim(&self) -> usize {
        // positions + velocities of every entity, then scenario extras
        let entities = self.n_agents
            + self.n_landmarks
            + usize::from(self.scenario == ScenarioId::CooperativePush)
            + usize::from(self.scenario == ScenarioId::Adversary);
        let extras = match self.scenario {
            ScenarioId::SpeakerListener => 2 * self.n_landmarks,
            ScenarioId::Reference => self.n_agents * self.n_landmarks,
            ScenarioId::CooperativePush => 0,
            ScenarioId::Adversary => self.n_agents,
        };
        4 * entities + extras + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub pos: Vec2,
    pub vel: Vec2,
    pub radius: f64,
    pub mass: f64,
    pub movable: bool,
    pub collide: bool,
}

impl Entity {
    fn new(pos: Vec2, radius: f64, mass: f64, movable: bool, collide: bool) -> Self {
        Self {
            pos,
            vel: [0.0; 2],
            radius,
            mass,
            movable,
            collide,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub scenario: ScenarioId,
    /// Cooperative agents, indexed by agent index.
    pub agents: Vec<Entity>,
    pub landmarks: Vec<Entity>,
    /// Pushable object (cooperative_push).
    pub object: Option<Entity>,
    /// Scripted pursuer (adversary).
    pub adversary: Option<Entity>,
    /// Goal landmark known only to the speaker (speaker_listener).
    pub goal: Option<usize>,
    /// Per-agent target landmark (reference).
    pub targets: Vec<usize>,
    /// Last symbol emitted by the speaker, if any.
    pub comm: Option<usize>,
    /// Agents that have already reached the target (adversary).
    pub arrived: Vec<bool>,
    /// Agents currently in contact with the adversary (adversary).
    pub tagged: Vec<bool>,
    pub step: usize,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub values: Vec<f64>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointAction(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<AgentObservation>,
    pub reward: f64,
    pub done: bool,
    /// True when the episode ended by the scenario's own terminal condition
    /// rather than the step limit.
    pub terminated: bool,
    pub state: WorldState,
}

fn sample_point<R: Rng>(rng: &mut R, half: f64) -> Vec2 {
    [rng.random_range(-half..=half), rng.random_range(-half..=half)]
}

#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

#[inline]
fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

fn move_direction(action: usize) -> Vec2 {
    match action {
        ACTION_POS_X => [1.0, 0.0],
        ACTION_NEG_X => [-1.0, 0.0],
        ACTION_POS_Y => [0.0, 1.0],
        ACTION_NEG_Y => [0.0, -1.0],
        _ => [0.0, 0.0],
    }
}

/// Samples an initial world from `seed`.
pub fn reset(spec: &ScenarioSpec, seed: u64) -> Result<(WorldState, Vec<AgentObservation>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &spec.physics;
    let n = spec.n_agents;

    let landmarks: Vec<Entity> = (0..spec.n_landmarks)
        .map(|_| Entity::new(sample_point(&mut rng, 1.0), p.landmark_radius, 1.0, false, false))
        .collect();

    let mut state = WorldState {
        scenario: spec.scenario,
        agents: Vec::with_capacity(n),
        landmarks,
        object: None,
        adversary: None,
        goal: None,
        targets: Vec::new(),
        comm: None,
        arrived: Vec::new(),
        tagged: Vec::new(),
        step: 0,
        done: false,
    };

    match spec.scenario {
        ScenarioId::SpeakerListener => {
            let speaker = Entity::new(sample_point(&mut rng, 1.0), p.agent_radius, p.agent_mass, false, false);
            let listener = Entity::new(sample_point(&mut rng, 1.0), p.agent_radius, p.agent_mass, true, false);
            state.agents = vec![speaker, listener];
            state.goal = Some(rng.random_range(0..spec.n_landmarks));
        }
        ScenarioId::Reference => {
            for _ in 0..n {
                state.agents.push(Entity::new(
                    sample_point(&mut rng, 1.0),
                    p.agent_radius,
                    p.agent_mass,
                    true,
                    false,
                ));
            }
            state.targets = (0..n).map(|_| rng.random_range(0..spec.n_landmarks)).collect();
        }
        ScenarioId::CooperativePush => {
            for _ in 0..n {
                state.agents.push(Entity::new(
                    sample_point(&mut rng, 1.0),
                    p.agent_radius,
                    p.agent_mass,
                    true,
                    true,
                ));
            }
            state.object = Some(Entity::new(
                sample_point(&mut rng, 0.5),
                p.object_radius,
                p.object_mass,
                true,
                true,
            ));
        }
        ScenarioId::Adversary => {
            for _ in 0..n {
                state.agents.push(Entity::new(
                    sample_point(&mut rng, 1.0),
                    p.agent_radius,
                    p.agent_mass,
                    true,
                    true,
                ));
            }
            state.adversary = Some(Entity::new(
                sample_point(&mut rng, 1.0),
                p.adversary_radius,
                p.agent_mass,
                true,
                true,
            ));
            state.arrived = vec![false; n];
            state.tagged = vec![false; n];
        }
    }

    let obs = observe(spec, &state);
    Ok((state, obs))
}

fn one_hot(index: Option<usize>, len: usize, out: &mut Vec<f64>) {
    for k in 0..len {
        out.push(if Some(k) == index { 1.0 } else { 0.0 });
    }
}

fn push_rel(out: &mut Vec<f64>, target: Vec2, origin: Vec2) {
    let d = sub(target, origin);
    out.extend_from_slice(&d);
}

/// Local observation of every cooperative agent.
///
/// Layouts (all positions relative to the observing agent):
/// - speaker: goal one-hot
/// - listener: own velocity, landmarks, heard symbol one-hot
/// - navigator: own velocity, landmarks, other agent, other agent's target one-hot
/// - pusher: own velocity, object, target landmark, teammates
/// - evader: own velocity, target landmark, adversary, teammates
pub fn observe(spec: &ScenarioSpec, state: &WorldState) -> Vec<AgentObservation> {
    (0..spec.n_agents)
        .map(|i| {
            let role = spec.role(i);
            let me = &state.agents[i];
            let mut v = Vec::with_capacity(spec.obs_dim(i));
            match role {
                Role::Speaker => one_hot(state.goal, spec.n_landmarks, &mut v),
                Role::Listener => {
                    v.extend_from_slice(&me.vel);
                    for l in &state.landmarks {
                        push_rel(&mut v, l.pos, me.pos);
                    }
                    one_hot(state.comm, spec.n_landmarks, &mut v);
                }
                Role::Navigator => {
                    v.extend_from_slice(&me.vel);
                    for l in &state.landmarks {
                        push_rel(&mut v, l.pos, me.pos);
                    }
                    let other = 1 - i;
                    push_rel(&mut v, state.agents[other].pos, me.pos);
                    one_hot(state.targets.get(other).copied(), spec.n_landmarks, &mut v);
                }
                Role::Pusher => {
                    v.extend_from_slice(&me.vel);
                    let object = state.object.as_ref().expect("push scenario has an object");
                    push_rel(&mut v, object.pos, me.pos);
                    push_rel(&mut v, state.landmarks[0].pos, me.pos);
                    for (j, other) in state.agents.iter().enumerate() {
                        if j != i {
                            push_rel(&mut v, other.pos, me.pos);
                        }
                    }
                }
                Role::Evader => {
                    v.extend_from_slice(&me.vel);
                    push_rel(&mut v, state.landmarks[0].pos, me.pos);
                    let adv = state.adversary.as_ref().expect("adversary scenario has an adversary");
                    push_rel(&mut v, adv.pos, me.pos);
                    for (j, other) in state.agents.iter().enumerate() {
                        if j != i {
                            push_rel(&mut v, other.pos, me.pos);
                        }
                    }
                }
            }
            debug_assert_eq!(v.len(), spec.obs_dim(i));
            AgentObservation { values: v, role }
        })
        .collect()
}

/// Centralized state vector used only by the mixing network during training.
pub fn global_state(spec: &ScenarioSpec, state: &WorldState) -> Vec<f64> {
    let mut s = Vec::with_capacity(spec.state_dim());
    let entities = state
        .agents
        .iter()
        .chain(&state.landmarks)
        .chain(state.object.iter())
        .chain(state.adversary.iter());
    for e in entities {
        s.extend_from_slice(&e.pos);
        s.extend_from_slice(&e.vel);
    }
    match spec.scenario {
        ScenarioId::SpeakerListener => {
            one_hot(state.goal, spec.n_landmarks, &mut s);
            one_hot(state.comm, spec.n_landmarks, &mut s);
        }
        ScenarioId::Reference => {
            for &t in &state.targets {
                one_hot(Some(t), spec.n_landmarks, &mut s);
            }
        }
        ScenarioId::CooperativePush => {}
        ScenarioId::Adversary => s.extend(state.arrived.iter().map(|&a| f64::from(u8::from(a)))),
    }
    s.push(state.step as f64 / spec.t_max as f64);
    debug_assert_eq!(s.len(), spec.state_dim());
    s
}

/// Greedy one-step-lookahead pursuit of the nearest cooperative agent.
///
/// The nearest agent is chosen with ties going to the lowest index; among the
/// movement actions the one whose predicted next position lands closest to
/// that agent wins, ties going to the lowest action index.
pub fn scripted_adversary(spec: &ScenarioSpec, state: &WorldState) -> usize {
    let Some(adv) = state.adversary.as_ref() else {
        return ACTION_NOOP;
    };
    let mut nearest = 0;
    let mut best = f64::INFINITY;
    for (i, a) in state.agents.iter().enumerate() {
        let d = dist(a.pos, adv.pos);
        if d < best {
            best = d;
            nearest = i;
        }
    }
    let target = state.agents[nearest].pos;
    let p = &spec.physics;
    let mut best_action = ACTION_NOOP;
    let mut best_dist = f64::INFINITY;
    for action in 0..MOVE_ACTIONS {
        let dir = move_direction(action);
        let mut pos = adv.pos;
        for k in 0..2 {
            let v = adv.vel[k] * (1.0 - p.damping) + dir[k] * p.action_force / adv.mass * p.dt;
            pos[k] += v * p.dt;
        }
        let d = dist(pos, target);
        if d < best_dist {
            best_dist = d;
            best_action = action;
        }
    }
    best_action
}

/// Magnitude of the soft contact force between two overlapping discs.
fn contact_magnitude(p: &Physics, distance: f64, min_distance: f64) -> f64 {
    let k = p.contact_margin;
    let x = -(distance - min_distance) / k;
    // k * softplus(x), computed without overflow
    let softplus = if x > 30.0 { x } else { x.exp().ln_1p() };
    p.contact_force * k * softplus
}

/// Advances the world one step under `actions`.
pub fn step(spec: &ScenarioSpec, state: &WorldState, actions: &JointAction) -> Result<StepResult> {
    if state.done {
        return Err(Error::Usage("cannot step a finished episode; call reset".into()));
    }
    if actions.0.len() != spec.n_agents {
        return Err(Error::Usage(format!(
            "expected {} actions, got {}",
            spec.n_agents,
            actions.0.len()
        )));
    }
    for (i, &a) in actions.0.iter().enumerate() {
        if a >= spec.action_count(i) {
            return Err(Error::Usage(format!(
                "action {a} out of range for agent {i} ({} actions)",
                spec.action_count(i)
            )));
        }
    }

    let p = &spec.physics;
    let mut next = state.clone();

    let adversary_action = scripted_adversary(spec, state);

    // Entity table: agents, then object, then adversary.
    let n = spec.n_agents;
    let mut bodies: Vec<&mut Entity> = next.agents.iter_mut().collect();
    let object_idx = next.object.as_mut().map(|o| {
        bodies.push(o);
        bodies.len() - 1
    });
    let adversary_idx = next.adversary.as_mut().map(|a| {
        bodies.push(a);
        bodies.len() - 1
    });

    let mut forces = vec![[0.0f64; 2]; bodies.len()];
    let mut action_forces = vec![[0.0f64; 2]; bodies.len()];
    for i in 0..n {
        if spec.role(i) == Role::Speaker {
            continue;
        }
        let dir = move_direction(actions.0[i]);
        action_forces[i] = [dir[0] * p.action_force, dir[1] * p.action_force];
    }
    if let Some(a) = adversary_idx {
        let dir = move_direction(adversary_action);
        action_forces[a] = [dir[0] * p.action_force, dir[1] * p.action_force];
    }
    for (f, af) in forces.iter_mut().zip(&action_forces) {
        f[0] += af[0];
        f[1] += af[1];
    }

    // Soft contacts. The heavy object is never displaced by contact forces;
    // it moves only through the push rule below.
    for a in 0..bodies.len() {
        for b in a + 1..bodies.len() {
            if !(bodies[a].collide && bodies[b].collide) {
                continue;
            }
            let delta = sub(bodies[a].pos, bodies[b].pos);
            let d = norm(delta);
            let min_d = bodies[a].radius + bodies[b].radius;
            let mag = contact_magnitude(p, d, min_d);
            if mag == 0.0 || d == 0.0 {
                continue;
            }
            let f = [mag * delta[0] / d, mag * delta[1] / d];
            if Some(a) != object_idx {
                forces[a][0] += f[0];
                forces[a][1] += f[1];
            }
            if Some(b) != object_idx {
                forces[b][0] -= f[0];
                forces[b][1] -= f[1];
            }
        }
    }

    if let Some(o) = object_idx {
        let mut push = [0.0; 2];
        for i in 0..n {
            let to_object = sub(bodies[o].pos, bodies[i].pos);
            let touching = norm(to_object) <= bodies[o].radius + bodies[i].radius + PUSH_CONTACT_SLACK;
            let toward = action_forces[i][0] * to_object[0] + action_forces[i][1] * to_object[1] > 0.0;
            if touching && toward {
                push[0] += action_forces[i][0];
                push[1] += action_forces[i][1];
            }
        }
        forces[o] = if norm(push) >= p.push_threshold * p.action_force {
            push
        } else {
            [0.0; 2]
        };
    }

    for (body, f) in bodies.iter_mut().zip(&forces) {
        if !body.movable {
            continue;
        }
        for k in 0..2 {
            body.vel[k] = body.vel[k] * (1.0 - p.damping) + f[k] / body.mass * p.dt;
            body.pos[k] += body.vel[k] * p.dt;
        }
    }
    drop(bodies);

    if spec.scenario == ScenarioId::SpeakerListener {
        next.comm = Some(actions.0[0]);
    }
    next.step += 1;

    let r = reward(spec, state, &mut next);
    let terminated = spec.scenario == ScenarioId::Adversary && next.arrived.iter().all(|&a| a);
    let done = terminated || next.step >= spec.t_max;
    next.done = done;

    Ok(StepResult {
        observations: observe(spec, &next),
        reward: r,
        done,
        terminated,
        state: next,
    })
}

/// Shared team reward for the transition `prev -> next`.
///
/// Event bookkeeping for the adversary scenario (arrivals, tags) is written
/// into `next`.
pub fn reward(spec: &ScenarioSpec, prev: &WorldState, next: &mut WorldState) -> f64 {
    let p = &spec.physics;
    let task = match spec.scenario {
        ScenarioId::SpeakerListener => {
            let goal = next.goal.unwrap_or(0);
            -dist(next.agents[1].pos, next.landmarks[goal].pos)
        }
        ScenarioId::Reference => -next
            .agents
            .iter()
            .zip(&next.targets)
            .map(|(a, &t)| dist(a.pos, next.landmarks[t].pos))
            .sum::<f64>(),
        ScenarioId::CooperativePush => {
            let object = next.object.as_ref().expect("push scenario has an object");
            -dist(object.pos, next.landmarks[0].pos) - 0.1
        }
        ScenarioId::Adversary => {
            let target = next.landmarks[0].pos;
            let adv = next.adversary.as_ref().expect("adversary scenario has an adversary").clone();
            let mut r = 0.0;
            let mut shaping = 0.0;
            for i in 0..next.agents.len() {
                let a = &next.agents[i];
                let d = dist(a.pos, target);
                shaping += d;
                if d <= p.arrival_radius && !prev.arrived[i] {
                    r += 10.0;
                    next.arrived[i] = true;
                }
                let in_contact = dist(a.pos, adv.pos) <= a.radius + adv.radius;
                if in_contact && !prev.tagged[i] {
                    r -= 5.0;
                }
                next.tagged[i] = in_contact;
            }
            r - shaping / next.agents.len() as f64
        }
    };
    task - boundary_penalty(p, next)
}

fn boundary_penalty(p: &Physics, state: &WorldState) -> f64 {
    state
        .agents
        .iter()
        .filter(|a| a.movable)
        .flat_map(|a| a.pos)
        .map(|x| {
            let over = x.abs() - p.boundary;
            if over > 0.0 {
                over * over
            } else {
                0.0
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noop(spec: &ScenarioSpec) -> JointAction {
        JointAction(vec![0; spec.n_agents])
    }

    #[test]
    fn reset_is_deterministic() {
        for id in ScenarioId::ALL {
            let spec = ScenarioSpec::new(id);
            assert_eq!(reset(&spec, 42).unwrap(), reset(&spec, 42).unwrap());
            assert_ne!(reset(&spec, 42).unwrap().0, reset(&spec, 43).unwrap().0);
        }
    }

    #[test]
    fn noop_from_rest_keeps_everything_still() {
        let spec = ScenarioSpec::new(ScenarioId::Reference);
        let (state, _) = reset(&spec, 1).unwrap();
        let out = step(&spec, &state, &noop(&spec)).unwrap();
        for (a, b) in state.agents.iter().zip(&out.state.agents) {
            assert_eq!(a.pos, b.pos);
            assert_eq!(b.vel, [0.0, 0.0]);
        }
    }

    #[test]
    fn constant_thrust_follows_damped_integrator() {
        let spec = ScenarioSpec::new(ScenarioId::Reference);
        let (mut state, _) = reset(&spec, 5).unwrap();
        let p = spec.physics;
        let limit = p.action_force / (p.agent_mass * p.damping) * p.dt;
        let mut expected_v = 0.0;
        let mut prev_x = state.agents[0].pos[0];
        for _ in 0..20 {
            let out = step(&spec, &state, &JointAction(vec![ACTION_POS_X, ACTION_NOOP])).unwrap();
            state = out.state;
            if state.done {
                break;
            }
            expected_v = expected_v * (1.0 - p.damping) + p.action_force / p.agent_mass * p.dt;
            let v = state.agents[0].vel[0];
            assert!((v - expected_v).abs() < 1e-12);
            assert!(v < limit);
            assert!(state.agents[0].pos[0] > prev_x);
            prev_x = state.agents[0].pos[0];
        }
    }

    #[test]
    fn stepping_a_done_state_is_a_usage_error() {
        let mut spec = ScenarioSpec::new(ScenarioId::SpeakerListener);
        spec.t_max = 1;
        let (state, _) = reset(&spec, 0).unwrap();
        let out = step(&spec, &state, &noop(&spec)).unwrap();
        assert!(out.done);
        assert!(matches!(step(&spec, &out.state, &noop(&spec)), Err(Error::Usage(_))));
    }

    #[test]
    fn action_out_of_range_rejected() {
        let spec = ScenarioSpec::new(ScenarioId::SpeakerListener);
        let (state, _) = reset(&spec, 0).unwrap();
        // speaker alphabet has 3 symbols
        assert!(step(&spec, &state, &JointAction(vec![3, 0])).is_err());
        assert!(step(&spec, &state, &JointAction(vec![2, 4])).is_ok());
    }

    #[test]
    fn speaker_sees_goal_listener_does_not() {
        let spec = ScenarioSpec::new(ScenarioId::SpeakerListener);
        let (mut state, _) = reset(&spec, 9).unwrap();
        let mut listener_views = Vec::new();
        for g in 0..spec.n_landmarks {
            state.goal = Some(g);
            let obs = observe(&spec, &state);
            assert_eq!(obs[0].values[g], 1.0);
            assert_eq!(obs[0].values.iter().sum::<f64>(), 1.0);
            listener_views.push(obs[1].values.clone());
        }
        assert!(listener_views.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn reference_agents_see_only_the_partner_target() {
        let spec = ScenarioSpec::new(ScenarioId::Reference);
        let (mut state, _) = reset(&spec, 3).unwrap();
        state.targets = vec![0, 2];
        let base = observe(&spec, &state);
        // tail of agent 0's observation is agent 1's target
        let tail = &base[0].values[base[0].values.len() - 3..];
        assert_eq!(tail, &[0.0, 0.0, 1.0]);
        for own in 0..3 {
            state.targets[0] = own;
            assert_eq!(observe(&spec, &state)[0], base[0]);
        }
    }

    #[test]
    fn listener_on_goal_scores_zero() {
        let spec = ScenarioSpec::new(ScenarioId::SpeakerListener);
        let (mut state, _) = reset(&spec, 4).unwrap();
        let g = state.goal.unwrap();
        state.agents[1].pos = state.landmarks[g].pos;
        let prev = state.clone();
        assert_eq!(reward(&spec, &prev, &mut state), 0.0);
    }

    #[test]
    fn reference_on_targets_scores_zero() {
        let spec = ScenarioSpec::new(ScenarioId::Reference);
        let (mut state, _) = reset(&spec, 4).unwrap();
        for i in 0..2 {
            state.agents[i].pos = state.landmarks[state.targets[i]].pos;
        }
        let prev = state.clone();
        assert_eq!(reward(&spec, &prev, &mut state), 0.0);
    }

    #[test]
    fn adversary_far_and_agents_on_target_is_positive() {
        let spec = ScenarioSpec::new(ScenarioId::Adversary);
        let (mut state, _) = reset(&spec, 2).unwrap();
        let target = state.landmarks[0].pos;
        let offsets = [[0.07, 0.0], [-0.035, 0.06], [-0.035, -0.06]];
        for (a, o) in state.agents.iter_mut().zip(offsets) {
            a.pos = [target[0] + o[0], target[1] + o[1]];
        }
        state.adversary.as_mut().unwrap().pos = [target[0] + 3.0, target[1] + 3.0];
        let out = step(&spec, &state, &noop(&spec)).unwrap();
        assert!(out.reward > 0.0, "reward {}", out.reward);
        assert!(out.terminated && out.done);
    }

    #[test]
    fn adversary_heads_for_nearest_agent() {
        let spec = ScenarioSpec::new(ScenarioId::Adversary);
        let (mut state, _) = reset(&spec, 0).unwrap();
        let adv = state.adversary.as_mut().unwrap();
        adv.pos = [0.0, 0.0];
        adv.vel = [0.0, 0.0];
        state.agents[0].pos = [1.0, 0.0];
        state.agents[1].pos = [0.0, 2.0];
        state.agents[2].pos = [-3.0, 0.0];
        assert_eq!(scripted_adversary(&spec, &state), ACTION_POS_X);
        // equidistant: agent 0 at (0,-1) and agent 1 at (0,1); lowest index wins
        state.agents[0].pos = [0.0, -1.0];
        state.agents[1].pos = [0.0, 1.0];
        assert_eq!(scripted_adversary(&spec, &state), ACTION_NEG_Y);
    }

    #[test]
    fn pursuit_closes_distance_monotonically() {
        let spec = ScenarioSpec {
            t_max: 200,
            ..ScenarioSpec::new(ScenarioId::Adversary)
        };
        let (mut state, _) = reset(&spec, 0).unwrap();
        state.landmarks[0].pos = [50.0, 50.0];
        state.adversary.as_mut().unwrap().pos = [0.0, 0.0];
        // out of reach for 100 steps, so contact never interrupts the chase
        state.agents[0].pos = [4.0, 3.0];
        state.agents[1].pos = [-9.0, 9.0];
        state.agents[2].pos = [9.0, -9.0];
        let mut distances = Vec::new();
        for _ in 0..100 {
            let out = step(&spec, &state, &noop(&spec)).unwrap();
            state = out.state;
            distances.push(dist(state.agents[0].pos, state.adversary.as_ref().unwrap().pos));
        }
        for w in distances[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn episodes_end_exactly_once() {
        for id in ScenarioId::ALL {
            let spec = ScenarioSpec::new(id);
            let (mut state, _) = reset(&spec, 8).unwrap();
            let mut dones = 0;
            let mut steps = 0;
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            while !state.done {
                let acts = (0..spec.n_agents).map(|i| rng.random_range(0..spec.action_count(i))).collect();
                let out = step(&spec, &state, &JointAction(acts)).unwrap();
                dones += usize::from(out.done);
                steps += 1;
                state = out.state;
            }
            assert_eq!(dones, 1);
            assert!(steps <= spec.t_max);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = ScenarioSpec::new(ScenarioId::CooperativePush);
        spec.n_agents = 1;
        assert!(spec.validate().is_err());
        let mut spec = ScenarioSpec::new(ScenarioId::SpeakerListener);
        spec.n_agents = 3;
        assert!(spec.validate().is_err());
        let mut spec = ScenarioSpec::new(ScenarioId::Reference);
        spec.physics.dt = 0.0;
        assert!(spec.validate().is_err());
    }
}
