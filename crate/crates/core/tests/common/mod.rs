//! Scalar TD-loss oracle shared by the learner and acceptance tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use raca_core::agentnet::{greedy, ObsBatch};
use raca_core::arena::{Arena, ArenaConfig, ObservationTriple};
use raca_core::learner::{run_episode, td_targets, EpisodeRecord, Model, PaddedBatch, Widths};
use raca_core::numerics::{Graph, ParamStore, Tensor};
use raca_core::relmix::{
    build_adjacency, gcn_forward, normalize_adjacency, relation_weights, Relation,
};

pub fn widths() -> Widths {
    Widths {
        d_k: 8,
        d_h: 6,
        d_mix: 5,
        d_gcn: 4,
    }
}

/// Per-agent Q rows and GCN node features of one step, computed for a
/// single episode with the hidden state carried by hand.
pub fn step_outputs(
    model: &Model,
    params: &ParamStore,
    obs: &[ObservationTriple],
    h: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let refs: Vec<&ObservationTriple> = obs.iter().collect();
    let batch = ObsBatch::new(&refs, obs[0].target_slots.len()).unwrap();
    let mut g = Graph::new();
    let h0 = g.constant(h.clone());
    let out = model.agent.forward(&mut g, params, &batch, 1, h0).unwrap();
    (
        g.value(out.q).clone(),
        g.value(out.features).clone(),
        g.value(out.hidden).clone(),
    )
}

pub fn weights(
    model: &Model,
    params: &ParamStore,
    features: &Tensor,
    vis: &[bool],
) -> Option<Vec<f64>> {
    let n = features.rows();
    match model.relation {
        Relation::None => None,
        Relation::Uniform => Some(vec![1.0 / n as f64; n]),
        Relation::Gcn => {
            let a = normalize_adjacency(&build_adjacency(n, vis));
            let logits = gcn_forward(&model.gcn, params, features, &a).unwrap();
            Some(relation_weights(logits.data()).unwrap())
        }
    }
}

/// Scalar re-computation of the TD loss, one episode and one step at a time.
pub fn oracle_loss(
    model: &Model,
    params: &ParamStore,
    target: &ParamStore,
    episodes: &[&EpisodeRecord],
    gamma: f64,
) -> (f64, Vec<Vec<f64>>) {
    let (mut sse, mut count) = (0.0, 0usize);
    let mut all_targets = Vec::new();
    for ep in episodes {
        let n = ep.n_agents();
        let mut h = model.agent.initial_hidden(n);
        let mut ht = model.agent.initial_hidden(n);
        let mut online = Vec::new();
        let mut next_values = Vec::new();
        for t in 0..=ep.len() {
            let (q, f, h2) = step_outputs(model, params, &ep.observations[t], &h);
            let (qt, ft, ht2) = step_outputs(model, target, &ep.observations[t], &ht);
            h = h2;
            ht = ht2;
            if t < ep.len() {
                let taken: Vec<f64> = (0..n).map(|i| q.row(i)[ep.actions[t][i]]).collect();
                let w = weights(model, params, &f, &ep.visibility[t]);
                online.push(
                    model
                        .mixer
                        .mix(params, &taken, w.as_deref(), &ep.states[t])
                        .unwrap(),
                );
            }
            if t > 0 {
                let best: Vec<f64> = (0..n)
                    .map(|i| qt.row(i)[greedy(qt.row(i), &ep.masks[t][i]).unwrap()])
                    .collect();
                let w = weights(model, target, &ft, &ep.visibility[t]);
                next_values.push(
                    model
                        .mixer
                        .mix(target, &best, w.as_deref(), &ep.states[t])
                        .unwrap(),
                );
            }
        }
        let mut ys = Vec::new();
        for t in 0..ep.len() {
            let y = if ep.terminated[t] {
                ep.rewards[t]
            } else {
                ep.rewards[t] + gamma * next_values[t]
            };
            sse += (online[t] - y).powi(2);
            count += 1;
            ys.push(y);
        }
        all_targets.push(ys);
    }
    (sse / count as f64, all_targets)
}

/// Epsilon-greedy episodes of varied length.
pub fn episodes(
    arena_cfg: ArenaConfig,
    model: &Model,
    params: &ParamStore,
    k: usize,
) -> Vec<EpisodeRecord> {
    let mut arena = Arena::new(arena_cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out: Vec<EpisodeRecord> = (0..k)
        .map(|s| run_episode(&mut arena, &model.agent, params, 0.8, s as u64, &mut rng).unwrap())
        .collect();
    assert!(
        out.iter().any(|e| e.len() != out[0].len()),
        "batch needs padding"
    );
    out
}

/// Library TD targets, unpadded back to one vector per episode.
pub fn padded_targets(
    model: &Model,
    target: &ParamStore,
    eps: &[&EpisodeRecord],
    gamma: f64,
) -> Vec<Vec<f64>> {
    let batch = PaddedBatch::new(eps).unwrap();
    let flat = td_targets(model, target, &batch, gamma).unwrap();
    let b = eps.len();
    eps.iter()
        .enumerate()
        .map(|(e, ep)| (0..ep.len()).map(|t| flat[t * b + e]).collect())
        .collect()
}
