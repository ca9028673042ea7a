use rand::Rng;

use crate::agentnet::{select_action, AgentNet};
use crate::arena::{Arena, ObservationTriple, Snapshot};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// A complete trajectory. Per-step vectors have `len() + 1` entries for
/// quantities observed in states (the final entry is the state after the
/// last transition) and `len()` entries for per-transition quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub observations: Vec<Vec<ObservationTriple>>,
    pub masks: Vec<Vec<Vec<bool>>>,
    pub states: Vec<Vec<f64>>,
    /// Flattened `n x n` ally visibility per state.
    pub visibility: Vec<Vec<bool>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    /// True exactly at the final transition.
    pub terminated: Vec<bool>,
    pub won: bool,
    pub seed: u64,
}

impl EpisodeRecord {
    fn start(seed: u64, snap: Snapshot) -> Self {
        EpisodeRecord {
            observations: vec![snap.observations],
            masks: vec![snap.masks],
            states: vec![snap.state],
            visibility: vec![snap.visibility],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: Vec::new(),
            won: false,
            seed,
        }
    }

    fn push(&mut self, actions: Vec<usize>, reward: f64, terminated: bool, snap: Snapshot) {
        self.actions.push(actions);
        self.rewards.push(reward);
        self.terminated.push(terminated);
        self.observations.push(snap.observations);
        self.masks.push(snap.masks);
        self.states.push(snap.state);
        self.visibility.push(snap.visibility);
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.observations[0].len()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Checks the structural invariants of a recorded episode.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let states_ok = [
            self.observations.len(),
            self.masks.len(),
            self.states.len(),
            self.visibility.len(),
        ]
        .iter()
        .all(|&l| l == t + 1);
        if t == 0 || !states_ok || self.rewards.len() != t || self.terminated.len() != t {
            return Err(Error::Contract(
                "episode record has inconsistent lengths".into(),
            ));
        }
        if self.terminated.iter().filter(|&&x| x).count() != 1 || !self.terminated[t - 1] {
            return Err(Error::Contract(
                "episode record must terminate exactly once, at its last step".into(),
            ));
        }
        for (step, (acts, masks)) in self.actions.iter().zip(&self.masks).enumerate() {
            for (agent, (&a, m)) in acts.iter().zip(masks).enumerate() {
                if !m.get(a).copied().unwrap_or(false) {
                    return Err(Error::Contract(format!(
                        "step {step}: agent {agent} took unavailable action {a}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Plays one episode with epsilon-greedy actions from the shared agent
/// network, starting from zero hidden states.
pub fn run_episode<R: Rng>(
    arena: &mut Arena,
    agent: &AgentNet,
    params: &ParamStore,
    epsilon: f64,
    seed: u64,
    rng: &mut R,
) -> Result<EpisodeRecord> {
    let snap = arena.reset(seed)?;
    let mut hidden = agent.initial_hidden(arena.n_agents());
    let mut record = EpisodeRecord::start(seed, snap);
    loop {
        let obs = record.observations.last().expect("non-empty");
        let masks = record.masks.last().expect("non-empty");
        let (q, h) = agent.step(params, obs, &hidden)?;
        hidden = h;
        let actions = masks
            .iter()
            .enumerate()
            .map(|(i, m)| select_action(q.row(i), m, epsilon, rng))
            .collect::<Result<Vec<_>>>()?;
        let (outcome, snap) = arena.step(&actions)?;
        record.push(actions, outcome.reward, outcome.terminated, snap);
        if outcome.terminated {
            record.won = outcome.won;
            return Ok(record);
        }
    }
}
