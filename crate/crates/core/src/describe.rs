//! Deterministic natural-language summaries of local observations.
//!
//! Quantities are bucketed before they reach the text: distances into
//! close / medium / far, directions into eight compass sectors. Only the
//! observing agent's own observation vector is read.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{AgentObservation, Role, ScenarioId, ScenarioSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceBucket {
    Close,
    Medium,
    Far,
}

impl DistanceBucket {
    pub fn of(distance: f64) -> Self {
        if distance < 0.3 {
            DistanceBucket::Close
        } else if distance < 0.8 {
            DistanceBucket::Medium
        } else {
            DistanceBucket::Far
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            DistanceBucket::Close => "close",
            DistanceBucket::Medium => "at medium range",
            DistanceBucket::Far => "far",
        }
    }
}

pub const COMPASS: [&str; 8] = [
    "east",
    "north-east",
    "north",
    "north-west",
    "west",
    "south-west",
    "south",
    "south-east",
];

/// Eight 45-degree sectors centred on the compass points; +x is east, +y is north.
pub fn compass_sector(dx: f64, dy: f64) -> &'static str {
    let angle = dy.atan2(dx);
    let sector = (angle / (PI / 4.0)).round() as i64;
    COMPASS[sector.rem_euclid(8) as usize]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSummary {
    pub agent: usize,
    pub text: String,
    pub scenario: ScenarioId,
}

/// One sentence template per scenario with `{agent}`, `{role}` and
/// `{entity_list}` placeholders.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: HashMap<ScenarioId, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let builtin = [
            (ScenarioId::SpeakerListener, include_str!("../templates/speaker_listener.txt")),
            (ScenarioId::Reference, include_str!("../templates/reference.txt")),
            (ScenarioId::CooperativePush, include_str!("../templates/cooperative_push.txt")),
            (ScenarioId::Adversary, include_str!("../templates/adversary.txt")),
        ];
        Self {
            templates: builtin
                .into_iter()
                .map(|(id, t)| (id, single_line(t)))
                .collect(),
        }
    }
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl TemplateSet {
    /// Loads `<scenario>.txt` files from `dir`; scenarios without a file keep
    /// the built-in template.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::default();
        for id in ScenarioId::ALL {
            let path = dir.join(format!("{id}.txt"));
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                set.insert(id, &text)?;
            }
        }
        Ok(set)
    }

    pub fn insert(&mut self, scenario: ScenarioId, template: &str) -> Result<()> {
        let t = single_line(template);
        if !t.contains("{entity_list}") {
            return Err(Error::Invalid(format!(
                "template for {scenario} lacks the {{entity_list}} placeholder"
            )));
        }
        self.templates.insert(scenario, t);
        Ok(())
    }

    pub fn get(&self, scenario: ScenarioId) -> &str {
        &self.templates[&scenario]
    }

    pub fn describe(
        &self,
        obs: &AgentObservation,
        agent: usize,
        spec: &ScenarioSpec,
    ) -> Result<ObservationSummary> {
        if agent >= spec.n_agents {
            return Err(Error::Usage(format!(
                "agent {agent} out of range for {} agents",
                spec.n_agents
            )));
        }
        let role = spec.role(agent);
        if obs.role != role || obs.values.len() != spec.obs_dim(agent) {
            return Err(Error::Usage(format!(
                "observation ({} of length {}) does not belong to agent {agent} of {}",
                obs.role,
                obs.values.len(),
                spec.scenario
            )));
        }
        let entities = entity_phrases(&obs.values, role, agent, spec).join("; ");
        let text = self
            .get(spec.scenario)
            .replace("{agent}", &agent.to_string())
            .replace("{role}", role.as_str())
            .replace("{entity_list}", &entities);
        Ok(ObservationSummary {
            agent,
            text: single_line(&text),
            scenario: spec.scenario,
        })
    }
}

/// Describes `obs` with the built-in templates.
pub fn describe(obs: &AgentObservation, agent: usize, spec: &ScenarioSpec) -> Result<ObservationSummary> {
    TemplateSet::default().describe(obs, agent, spec)
}

fn relative(name: &str, v: &[f64]) -> String {
    let d = v[0].hypot(v[1]);
    format!(
        "{name} is {} to the {}",
        DistanceBucket::of(d).phrase(),
        compass_sector(v[0], v[1])
    )
}

fn motion(v: &[f64]) -> String {
    if v[0].hypot(v[1]) < 1e-3 {
        "it is stationary".to_string()
    } else {
        format!("it is moving {}", compass_sector(v[0], v[1]))
    }
}

fn hot_index(v: &[f64]) -> Option<usize> {
    v.iter().position(|&x| x > 0.5)
}

fn teammates(agent: usize, n: usize) -> impl Iterator<Item = usize> {
    (0..n).filter(move |&j| j != agent)
}

fn entity_phrases(v: &[f64], role: Role, agent: usize, spec: &ScenarioSpec) -> Vec<String> {
    let l = spec.n_landmarks;
    let mut out = Vec::new();
    match role {
        Role::Speaker => {
            out.push("it cannot move".to_string());
            match hot_index(&v[..l]) {
                Some(g) => out.push(format!("it knows the goal is landmark {g}")),
                None => out.push("it has not been told a goal".to_string()),
            }
        }
        Role::Listener => {
            out.push(motion(&v[0..2]));
            for k in 0..l {
                out.push(relative(&format!("landmark {k}"), &v[2 + 2 * k..4 + 2 * k]));
            }
            match hot_index(&v[2 + 2 * l..2 + 3 * l]) {
                Some(s) => out.push(format!("it last heard symbol {s}")),
                None => out.push("it has heard no symbol yet".to_string()),
            }
        }
        Role::Navigator => {
            out.push(motion(&v[0..2]));
            for k in 0..l {
                out.push(relative(&format!("landmark {k}"), &v[2 + 2 * k..4 + 2 * k]));
            }
            let other = 1 - agent;
            let base = 2 + 2 * l;
            out.push(relative(&format!("agent {other}"), &v[base..base + 2]));
            if let Some(t) = hot_index(&v[base + 2..base + 2 + l]) {
                out.push(format!("agent {other} must reach landmark {t}"));
            }
            out.push("it does not know its own target".to_string());
        }
        Role::Pusher => {
            out.push(motion(&v[0..2]));
            out.push(relative("the object", &v[2..4]));
            out.push(relative("the target", &v[4..6]));
            for (k, j) in teammates(agent, spec.n_agents).enumerate() {
                out.push(relative(&format!("agent {j}"), &v[6 + 2 * k..8 + 2 * k]));
            }
        }
        Role::Evader => {
            out.push(motion(&v[0..2]));
            out.push(relative("the target", &v[2..4]));
            out.push(relative("the adversary", &v[4..6]));
            for (k, j) in teammates(agent, spec.n_agents).enumerate() {
                out.push(relative(&format!("agent {j}"), &v[6 + 2 * k..8 + 2 * k]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{observe, reset};

    #[test]
    fn buckets_are_total_and_ordered() {
        assert_eq!(DistanceBucket::of(0.0), DistanceBucket::Close);
        assert_eq!(DistanceBucket::of(0.2999), DistanceBucket::Close);
        assert_eq!(DistanceBucket::of(0.3), DistanceBucket::Medium);
        assert_eq!(DistanceBucket::of(0.7999), DistanceBucket::Medium);
        assert_eq!(DistanceBucket::of(0.8), DistanceBucket::Far);
        assert_eq!(DistanceBucket::of(1e9), DistanceBucket::Far);
        assert_eq!(compass_sector(1.0, 0.0), "east");
        assert_eq!(compass_sector(1.0, 1.0), "north-east");
        assert_eq!(compass_sector(0.0, 1.0), "north");
        assert_eq!(compass_sector(-1.0, 0.0), "west");
        assert_eq!(compass_sector(-1.0, -1e-9), "west");
        assert_eq!(compass_sector(0.3, -1.0), "south");
        assert_eq!(compass_sector(0.0, 0.0), "east");
    }

    #[test]
    fn speaker_names_the_goal() {
        let spec = ScenarioSpec::new(ScenarioId::SpeakerListener);
        let (mut state, _) = reset(&spec, 0).unwrap();
        state.goal = Some(2);
        let obs = observe(&spec, &state);
        let s = describe(&obs[0], 0, &spec).unwrap();
        assert!(s.text.contains("goal is landmark 2"), "{}", s.text);
        assert!(s.text.contains("speaker"));
    }

    #[test]
    fn listener_text_is_goal_blind() {
        let spec = ScenarioSpec::new(ScenarioId::SpeakerListener);
        let (mut state, _) = reset(&spec, 0).unwrap();
        let mut texts = Vec::new();
        for g in 0..spec.n_landmarks {
            state.goal = Some(g);
            let obs = observe(&spec, &state);
            let s = describe(&obs[1], 1, &spec).unwrap();
            assert!(!s.text.contains("goal"), "{}", s.text);
            texts.push(s.text);
        }
        assert!(texts.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn close_teammate_to_the_east() {
        let spec = ScenarioSpec::new(ScenarioId::CooperativePush);
        let (mut state, _) = reset(&spec, 0).unwrap();
        let me = state.agents[0].pos;
        state.agents[1].pos = [me[0] + 0.1, me[1]];
        let obs = observe(&spec, &state);
        let s = describe(&obs[0], 0, &spec).unwrap();
        assert!(s.text.contains("agent 1 is close to the east"), "{}", s.text);
    }

    #[test]
    fn summaries_are_single_line_and_deterministic() {
        for id in ScenarioId::ALL {
            let spec = ScenarioSpec::new(id);
            let (_, obs) = reset(&spec, 17).unwrap();
            for (i, o) in obs.iter().enumerate() {
                let a = describe(o, i, &spec).unwrap();
                let b = describe(o, i, &spec).unwrap();
                assert_eq!(a, b);
                assert!(!a.text.is_empty());
                assert!(!a.text.contains('\n') && !a.text.contains('\r'));
            }
        }
    }

    #[test]
    fn mismatched_observation_is_rejected() {
        let spec = ScenarioSpec::new(ScenarioId::SpeakerListener);
        let (_, obs) = reset(&spec, 0).unwrap();
        assert!(describe(&obs[0], 1, &spec).is_err());
        let push = ScenarioSpec::new(ScenarioId::CooperativePush);
        assert!(describe(&obs[1], 1, &push).is_err());
    }

    #[test]
    fn custom_templates_override_builtin() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("reference.txt"), "R{agent}\n{role}\n{entity_list}\n").unwrap();
        let set = TemplateSet::from_dir(dir.path()).unwrap();
        let spec = ScenarioSpec::new(ScenarioId::Reference);
        let (_, obs) = reset(&spec, 0).unwrap();
        let s = set.describe(&obs[1], 1, &spec).unwrap();
        assert!(s.text.starts_with("R1 navigator it is stationary"), "{}", s.text);
        let mut bad = TemplateSet::default();
        assert!(bad.insert(ScenarioId::Reference, "no placeholder").is_err());
    }
}
