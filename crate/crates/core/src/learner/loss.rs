use std::collections::BTreeMap;
use std::sync::Arc;

use super::{EpisodeRecord, Model};
use crate::agentnet::{greedy, ObsBatch};
use crate::arena::{ObservationTriple, ACTION_NOOP, INV_DIM, OWN_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::relmix::{normalized_blocks, relation_weights_on, weight_q};

/// Result of one TD-loss evaluation.
#[derive(Clone, Debug)]
pub struct TdLoss {
    pub loss: f64,
    /// Mean `Q_tot(tau, u)` over valid steps.
    pub mean_q_tot: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// A batch of episodes laid out time-major and padded to the longest one:
/// row `p = t * B + b` is step `t` of episode `b`.
pub struct PaddedBatch<'a> {
    episodes: Vec<&'a EpisodeRecord>,
    n: usize,
    n_slots: usize,
    max_len: usize,
    padding: ObservationTriple,
}

impl<'a> PaddedBatch<'a> {
    pub fn new(episodes: &[&'a EpisodeRecord]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::Contract("td_loss needs a non-empty batch".into()))?;
        let n = first.n_agents();
        let n_slots = first.observations[0][0].target_slots.len();
        for ep in episodes {
            if ep.is_empty() || ep.n_agents() != n {
                return Err(Error::Contract(
                    "batch episodes must be non-empty and share a team size".into(),
                ));
            }
        }
        let max_len = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        Ok(PaddedBatch {
            episodes: episodes.to_vec(),
            n,
            n_slots,
            max_len,
            padding: ObservationTriple {
                own: [0.0; OWN_DIM],
                variant: Vec::new(),
                invariant: [0.0; INV_DIM],
                entities: Vec::new(),
                target_slots: vec![None; n_slots],
            },
        })
    }

    pub fn batch_size(&self) -> usize {
        self.episodes.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Observations of state steps `0..steps`, step-major then episode
    /// then agent.
    fn observations(&self, steps: usize) -> Result<ObsBatch> {
        let mut refs = Vec::with_capacity(steps * self.batch_size() * self.n);
        for t in 0..steps {
            for ep in &self.episodes {
                match ep.observations.get(t) {
                    Some(obs) => refs.extend(obs.iter()),
                    None => refs.extend(std::iter::repeat_n(&self.padding, self.n)),
                }
            }
        }
        ObsBatch::new(&refs, self.n_slots)
    }

    /// Normalised adjacency blocks for state steps `from..from + steps`.
    fn blocks(&self, from: usize, steps: usize) -> Arc<[f64]> {
        let empty = vec![false; self.n * self.n];
        let rel = (from..from + steps).flat_map(|t| {
            self.episodes
                .iter()
                .map(move |ep| ep.visibility.get(t).map(|v| v.as_slice()))
        });
        let rel: Vec<&[bool]> = rel.map(|v| v.unwrap_or(&empty)).collect();
        normalized_blocks(self.n, rel.into_iter()).into()
    }

    fn states(&self, from: usize, steps: usize, width: usize) -> Result<Tensor> {
        let mut out = Vec::with_capacity(steps * self.batch_size() * width);
        for t in from..from + steps {
            for ep in &self.episodes {
                match ep.states.get(t) {
                    Some(s) if s.len() == width => out.extend_from_slice(s),
                    Some(s) => return Err(Error::dim("mix", &[s.len()], &[width])),
                    None => out.extend(std::iter::repeat_n(0.0, width)),
                }
            }
        }
        Tensor::matrix(steps * self.batch_size(), width, out)
    }

    /// Validity mask over transitions, `T*B` long.
    pub fn valid(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.max_len * self.batch_size());
        for t in 0..self.max_len {
            for ep in &self.episodes {
                out.push((t < ep.len()) as u8 as f64);
            }
        }
        out
    }

    fn actions(&self) -> Arc<[usize]> {
        let mut out = Vec::with_capacity(self.max_len * self.batch_size() * self.n);
        for t in 0..self.max_len {
            for ep in &self.episodes {
                match ep.actions.get(t) {
                    Some(a) => out.extend_from_slice(a),
                    None => out.extend(std::iter::repeat_n(ACTION_NOOP, self.n)),
                }
            }
        }
        out.into()
    }
}

/// Records `Q_tot` of the taken actions for every padded transition on `g`,
/// giving a `(T*B) x 1` column.
pub fn q_tot_taken(
    g: &mut Graph,
    model: &Model,
    params: &ParamStore,
    batch: &PaddedBatch,
) -> Result<Var> {
    let (t_max, b, n) = (batch.max_len, batch.batch_size(), batch.n);
    let obs = batch.observations(t_max)?;
    let h0 = g.constant(model.agent.initial_hidden(b * n));
    let out = model.agent.forward(g, params, &obs, t_max, h0)?;
    let chosen = g.pick(out.q, batch.actions())?;
    let chosen = g.reshape(chosen, vec![t_max * b, n])?;
    let w = relation_weights_on(
        g,
        model.relation,
        &model.gcn,
        params,
        out.features,
        batch.blocks(0, t_max),
        t_max * b,
        n,
    )?;
    let q = weight_q(g, chosen, w)?;
    let s = g.constant(batch.states(0, t_max, model.mixer.state_dim)?);
    model.mixer.forward(g, params, q, s)
}

/// TD targets `y = r + gamma * Q_tot(tau', u*; target)` for every padded
/// transition, with `u*` the per-agent greedy actions under the target
/// parameters and `y = r` on terminal transitions. Padded entries are 0.
pub fn td_targets(
    model: &Model,
    target: &ParamStore,
    batch: &PaddedBatch,
    gamma: f64,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let (t_max, b, n) = (batch.max_len, batch.batch_size(), batch.n);
    let mut g = Graph::new();
    let obs = batch.observations(t_max + 1)?;
    let h0 = g.constant(model.agent.initial_hidden(b * n));
    let out = model.agent.forward(&mut g, target, &obs, t_max + 1, h0)?;

    let q = g.value(out.q).clone();
    let noop_only: Vec<bool> = (0..q.cols()).map(|a| a == ACTION_NOOP).collect();
    let mut best = Vec::with_capacity(t_max * b * n);
    for t in 1..=t_max {
        for (e, ep) in batch.episodes.iter().enumerate() {
            for i in 0..n {
                let row = q.row((t * b + e) * n + i);
                let mask = ep.masks.get(t).map_or(&noop_only, |m| &m[i]);
                let a = greedy(row, mask).ok_or_else(|| {
                    Error::Contract(format!("step {t}: agent {i} has no available action"))
                })?;
                best.push(row[a]);
            }
        }
    }
    let next_q = g.constant(Tensor::matrix(t_max * b, n, best)?);
    let rows = t_max * b * n;
    let features = g.slice_rows(out.features, b * n, rows)?;
    let w = relation_weights_on(
        &mut g,
        model.relation,
        &model.gcn,
        target,
        features,
        batch.blocks(1, t_max),
        t_max * b,
        n,
    )?;
    let next_q = weight_q(&mut g, next_q, w)?;
    let s = g.constant(batch.states(1, t_max, model.mixer.state_dim)?);
    let next = model.mixer.forward(&mut g, target, next_q, s)?;
    let next = g.value(next).data();

    let mut y = Vec::with_capacity(t_max * b);
    for t in 0..t_max {
        for (e, ep) in batch.episodes.iter().enumerate() {
            y.push(if t < ep.len() {
                let bootstrap = if ep.terminated[t] {
                    0.0
                } else {
                    gamma * next[t * b + e]
                };
                ep.rewards[t] + bootstrap
            } else {
                0.0
            });
        }
    }
    Ok(y)
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(
            "gamma",
            format!("must lie in [0, 1), got {gamma}"),
        ));
    }
    Ok(())
}

/// Records the masked mean squared TD error on `g`. Returns the loss and
/// the `Q_tot` column.
pub fn td_loss_on(
    g: &mut Graph,
    model: &Model,
    params: &ParamStore,
    batch: &PaddedBatch,
    targets: &[f64],
) -> Result<(Var, Var)> {
    let valid = batch.valid();
    let count: f64 = valid.iter().sum();
    let q_tot = q_tot_taken(g, model, params, batch)?;
    let rows = valid.len();
    let y = g.constant(Tensor::matrix(rows, 1, targets.to_vec())?);
    let mask = g.constant(Tensor::matrix(rows, 1, valid)?);
    let diff = g.sub(q_tot, y)?;
    let diff = g.mul(diff, mask)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok((g.scale(total, 1.0 / count), q_tot))
}

/// Masked mean squared TD error over a batch of episodes, with gradients
/// for every parameter in `params` that the loss depends on.
pub fn td_loss(
    model: &Model,
    params: &ParamStore,
    target: &ParamStore,
    episodes: &[&EpisodeRecord],
    gamma: f64,
) -> Result<TdLoss> {
    let batch = PaddedBatch::new(episodes)?;
    let y = td_targets(model, target, &batch, gamma)?;
    let mut g = Graph::new();
    let (loss, q_tot) = td_loss_on(&mut g, model, params, &batch, &y)?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Divergence {
            name: "td_loss".into(),
        });
    }
    let valid = batch.valid();
    let mean_q_tot = g
        .value(q_tot)
        .data()
        .iter()
        .zip(&valid)
        .map(|(q, m)| q * m)
        .sum::<f64>()
        / valid.iter().sum::<f64>();
    let grads = g.backward(loss)?.by_name(&g);
    Ok(TdLoss {
        loss: loss_value,
        mean_q_tot,
        grads,
    })
}
