use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agentnet::{greedy, AgentNet};
use crate::arena::{script, Arena, ArenaConfig};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Evaluation arenas are seeded from here upwards, away from training seeds.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub win_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

/// Any per-step team controller: maps the arena to one action per agent.
pub trait TeamPolicy {
    fn reset(&mut self, n_agents: usize);
    fn act(&mut self, arena: &Arena, snapshot: &crate::arena::Snapshot) -> Result<Vec<usize>>;
}

/// Greedy decentralised execution of the shared agent network. Only the
/// agents' own observations and hidden states are consulted.
pub struct GreedyAgents<'a> {
    pub net: &'a AgentNet,
    pub params: &'a ParamStore,
    hidden: crate::numerics::Tensor,
}

impl<'a> GreedyAgents<'a> {
    pub fn new(net: &'a AgentNet, params: &'a ParamStore) -> Result<Self> {
        net.check(params)?;
        Ok(GreedyAgents {
            net,
            params,
            hidden: net.initial_hidden(0),
        })
    }
}

impl TeamPolicy for GreedyAgents<'_> {
    fn reset(&mut self, n_agents: usize) {
        self.hidden = self.net.initial_hidden(n_agents);
    }

    fn act(&mut self, _arena: &Arena, snap: &crate::arena::Snapshot) -> Result<Vec<usize>> {
        let (q, h) = self
            .net
            .step(self.params, &snap.observations, &self.hidden)?;
        self.hidden = h;
        snap.masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if q.cols() != m.len() {
                    return Err(Error::dim("agent_q", &[q.cols()], &[m.len()]));
                }
                greedy(q.row(i), m)
                    .ok_or_else(|| Error::Contract(format!("agent {i} has no available action")))
            })
            .collect()
    }
}

/// Uniformly random available actions.
pub struct RandomPolicy(pub ChaCha8Rng);

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl TeamPolicy for RandomPolicy {
    fn reset(&mut self, _: usize) {}

    fn act(&mut self, _: &Arena, snap: &crate::arena::Snapshot) -> Result<Vec<usize>> {
        Ok(script::random_actions(&snap.masks, &mut self.0))
    }
}

/// The attack-nearest script driving the controlled team.
pub struct ScriptedPolicy;

impl TeamPolicy for ScriptedPolicy {
    fn reset(&mut self, _: usize) {}

    fn act(&mut self, arena: &Arena, _: &crate::arena::Snapshot) -> Result<Vec<usize>> {
        Ok(script::ally_attack_nearest(arena))
    }
}

/// Plays `n_episodes` on arenas seeded `EVAL_SEED_OFFSET + seed + k`.
pub fn evaluate_policy(
    policy: &mut dyn TeamPolicy,
    arena: &ArenaConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if n_episodes == 0 {
        return Err(Error::config("eval_episodes", "must be at least 1"));
    }
    let mut env = Arena::new(arena.clone())?;
    let (mut wins, mut total_return, mut total_len) = (0usize, 0.0, 0usize);
    for k in 0..n_episodes as u64 {
        let mut snap = env.reset(EVAL_SEED_OFFSET + seed + k)?;
        policy.reset(env.n_agents());
        loop {
            let actions = policy.act(&env, &snap)?;
            let (outcome, next) = env.step(&actions)?;
            total_return += outcome.reward;
            snap = next;
            if outcome.terminated {
                wins += outcome.won as usize;
                total_len += env.steps();
                break;
            }
        }
    }
    let n = n_episodes as f64;
    Ok(EvalResult {
        win_rate: wins as f64 / n,
        mean_return: total_return / n,
        mean_length: total_len as f64 / n,
    })
}

/// Greedy evaluation of agent parameters alone; no mixer or relation
/// encoder tensors are needed.
pub fn evaluate(
    net: &AgentNet,
    params: &ParamStore,
    arena: &ArenaConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut policy = GreedyAgents::new(net, params)?;
    evaluate_policy(&mut policy, arena, n_episodes, seed)
}
