//! Per-agent recurrent Q-network shared by every agent.
//!
//! Each agent's observation is split into its own features, a variable
//! number of entity rows, and a fixed-width tail. Own features produce a
//! query, entity rows produce keys and values, and scaled dot-product
//! attention pools the entity rows into one embedding. A fully connected
//! layer `g` refines that embedding, which is concatenated with the fixed
//! tail and fed to a GRU. Q-values for the six basic actions come from a
//! linear head on the hidden state. The Q-value of "act on target k" is a
//! bilinear score between the hidden state and the observed row of entity
//! k, so no parameter depends on how many entities exist.

mod batch;

pub use batch::ObsBatch;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arena::{ObservationTriple, INV_DIM, N_BASIC_ACTIONS, OWN_DIM, VAR_DIM};
use crate::error::{Error, Result};
use crate::numerics::{Graph, GruCell, ParamStore, Segment, Tensor, Var, OUTPUT_GAIN};

/// How entity rows are pooled into one embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Abstraction {
    Attention,
    /// Masked mean of the value rows; the query and key projections are
    /// not used.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentNetConfig {
    pub d_k: usize,
    pub d_h: usize,
    pub abstraction: Abstraction,
}

impl Default for AgentNetConfig {
    fn default() -> Self {
        AgentNetConfig {
            d_k: 64,
            d_h: 64,
            abstraction: Abstraction::Attention,
        }
    }
}

pub const PREFIX: &str = "agent.";

const QUERY: &str = "agent.query";
const KEY: &str = "agent.key";
const VALUE: &str = "agent.value";
const POST: &str = "agent.post";
const GRU: &str = "agent.gru";
const BASIC: &str = "agent.basic";
const TARGET_H: &str = "agent.target_h";
const TARGET_E: &str = "agent.target_e";

/// Output of one forward pass over a step-major batch.
pub struct AgentOutputs {
    /// Post-attention embedding `g(attend(..))`, one row per observation.
    pub embedding: Var,
    /// GRU inputs `[embedding, invariant]`; these double as the node
    /// features of the relation encoder.
    pub features: Var,
    /// Q-values, one row per observation, `6 + n_slots` wide.
    pub q: Var,
    /// Hidden state after the last step.
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct AgentNet {
    config: AgentNetConfig,
    gru: GruCell,
}

impl AgentNet {
    pub fn new(config: AgentNetConfig) -> Result<Self> {
        if config.d_k == 0 {
            return Err(Error::config("d_k", "must be positive"));
        }
        if config.d_h == 0 {
            return Err(Error::config("d_h", "must be positive"));
        }
        let gru = GruCell::new(GRU, config.d_k + INV_DIM, config.d_h);
        Ok(AgentNet { config, gru })
    }

    pub fn config(&self) -> &AgentNetConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.d_h
    }

    /// Width of the per-agent node features handed to the relation encoder.
    pub fn node_feature_dim(&self) -> usize {
        self.config.d_k + INV_DIM
    }

    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (dk, dh) = (self.config.d_k, self.config.d_h);
        let mut layers = vec![(VALUE, VAR_DIM, dk), (POST, dk, dk)];
        if self.config.abstraction == Abstraction::Attention {
            layers.push((QUERY, OWN_DIM, dk));
            layers.push((KEY, VAR_DIM, dk));
        }
        layers.extend([
            (BASIC, dh, N_BASIC_ACTIONS),
            (TARGET_H, dh, dk),
            (TARGET_E, VAR_DIM, dk),
        ]);
        let mut shapes = Vec::new();
        for (name, fan_in, fan_out) in layers {
            shapes.push((format!("{name}.w"), vec![fan_in, fan_out]));
            shapes.push((format!("{name}.b"), vec![fan_out]));
        }
        for gate in ["r", "z", "n"] {
            shapes.push((format!("{GRU}.x{gate}.w"), vec![dk + INV_DIM, dh]));
            shapes.push((format!("{GRU}.x{gate}.b"), vec![dh]));
            shapes.push((format!("{GRU}.h{gate}.w"), vec![dh, dh]));
            shapes.push((format!("{GRU}.h{gate}.b"), vec![dh]));
        }
        shapes
    }

    /// Adds freshly initialised agent parameters to `store`.
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let (dk, dh) = (self.config.d_k, self.config.d_h);
        if self.config.abstraction == Abstraction::Attention {
            store.init_linear(rng, QUERY, OWN_DIM, dk);
            store.init_linear(rng, KEY, VAR_DIM, dk);
        }
        store.init_linear(rng, VALUE, VAR_DIM, dk);
        store.init_linear(rng, POST, dk, dk);
        self.gru.init(store, rng);
        store.init_linear_scaled(rng, BASIC, dh, N_BASIC_ACTIONS, OUTPUT_GAIN);
        store.init_linear_scaled(rng, TARGET_H, dh, dk, OUTPUT_GAIN);
        store.init_linear(rng, TARGET_E, VAR_DIM, dk);
    }

    /// Verifies that every agent tensor exists with the shape this network
    /// and the arena's feature layout require.
    pub fn check(&self, store: &ParamStore) -> Result<()> {
        for (name, shape) in self.expected_shapes() {
            let t = store
                .get(&name)
                .map_err(|_| Error::Shape(format!("agent parameter `{name}` is missing")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "agent parameter `{name}` has shape {:?} but the arena feature layout \
                     (own {OWN_DIM}, entity {VAR_DIM}, invariant {INV_DIM}) with d_k={}, d_h={} \
                     needs {:?}",
                    t.shape(),
                    self.config.d_k,
                    self.config.d_h,
                    shape
                )));
            }
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
        let w = g.param_from(store, &format!("{name}.w"))?;
        let b = g.param_from(store, &format!("{name}.b"))?;
        g.linear(x, w, b)
    }

    /// Projects own features to queries and entity rows to keys and values.
    /// Returns `(Q, K, V)` with shapes `R x d_k`, `M x d_k`, `M x d_k`.
    pub fn qkv(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        own: Var,
        variant: Var,
    ) -> Result<(Var, Var, Var)> {
        let q = self.linear(g, store, QUERY, own)?;
        let k = self.linear(g, store, KEY, variant)?;
        let v = self.linear(g, store, VALUE, variant)?;
        Ok((q, k, v))
    }

    /// Pools each observation's entity rows into a `d_k` embedding and
    /// applies `g`. Result is `R x d_k`.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &ObsBatch,
        vars: &BatchVars,
    ) -> Result<Var> {
        let pooled = match self.config.abstraction {
            Abstraction::Attention => {
                let (q, k, v) = self.qkv(g, store, vars.own, vars.variant)?;
                g.segment_attention(q, k, v, batch.segments())?
            }
            Abstraction::Mean => {
                let v = self.linear(g, store, VALUE, vars.variant)?;
                g.segment_mean(v, batch.segments())?
            }
        };
        let post = self.linear(g, store, POST, pooled)?;
        Ok(g.relu(post))
    }

    /// Q-values from hidden states `h` (one row per observation of `batch`).
    pub fn q_head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &ObsBatch,
        vars: &BatchVars,
        h: Var,
    ) -> Result<Var> {
        let basic = self.linear(g, store, BASIC, h)?;
        let u = self.linear(g, store, TARGET_H, h)?;
        let ent = self.linear(g, store, TARGET_E, vars.variant)?;
        let gathered = g.gather_rows(ent, batch.slots())?;
        let targets = g.group_dot(u, gathered)?;
        g.concat_cols(&[basic, targets])
    }

    /// Runs the network over `batch`, whose rows are grouped by time step:
    /// `steps` consecutive groups of `batch.rows() / steps` observations.
    /// `h0` is the hidden state before the first step.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &ObsBatch,
        steps: usize,
        h0: Var,
    ) -> Result<AgentOutputs> {
        if steps == 0 || !batch.rows().is_multiple_of(steps) {
            return Err(Error::Contract(format!(
                "{} observation rows do not split into {steps} steps",
                batch.rows()
            )));
        }
        let per_step = batch.rows() / steps;
        if g.value(h0).shape() != [per_step, self.config.d_h] {
            return Err(Error::dim(
                "agent_q",
                g.value(h0).shape(),
                &[per_step, self.config.d_h],
            ));
        }
        let vars = batch.record(g);
        let embedding = self.embed(g, store, batch, &vars)?;
        let x = g.concat_cols(&[embedding, vars.invariant])?;
        let mut h = h0;
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = if steps == 1 {
                x
            } else {
                g.slice_rows(x, t * per_step, per_step)?
            };
            h = self.gru.step(g, store, xt, h)?;
            hs.push(h);
        }
        let all_h = if steps == 1 { h } else { g.concat_rows(&hs)? };
        let q = self.q_head(g, store, batch, &vars, all_h)?;
        Ok(AgentOutputs {
            embedding,
            features: x,
            q,
            hidden: h,
        })
    }

    /// One decentralised step for a team: each agent's Q-values and its
    /// next hidden state. `hidden` is `n x d_h`.
    pub fn step(
        &self,
        store: &ParamStore,
        obs: &[ObservationTriple],
        hidden: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let n_slots = obs.first().map_or(0, |o| o.target_slots.len());
        let refs: Vec<&ObservationTriple> = obs.iter().collect();
        let batch = ObsBatch::new(&refs, n_slots)?;
        let mut g = Graph::new();
        let h0 = g.constant(hidden.clone());
        let out = self.forward(&mut g, store, &batch, 1, h0)?;
        Ok((g.value(out.q).clone(), g.value(out.hidden).clone()))
    }

    /// Q-values of a single agent and its next hidden state.
    pub fn agent_q(
        &self,
        store: &ParamStore,
        obs: &ObservationTriple,
        hidden: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = Tensor::matrix(1, hidden.len(), hidden.to_vec())?;
        let (q, h) = self.step(store, std::slice::from_ref(obs), &h)?;
        Ok((q.into_vec(), h.into_vec()))
    }

    /// Zero hidden state for `n` agents.
    pub fn initial_hidden(&self, n: usize) -> Tensor {
        Tensor::zeros(&[n, self.config.d_h])
    }
}

/// Constants recorded on a graph for one [`ObsBatch`].
pub struct BatchVars {
    pub own: Var,
    pub variant: Var,
    pub invariant: Var,
}

/// Projects one observation to `(Q, K, V)` on plain tensors.
pub fn build_qkv(
    net: &AgentNet,
    store: &ParamStore,
    obs: &ObservationTriple,
) -> Result<(Tensor, Tensor, Tensor)> {
    let batch = ObsBatch::new(&[obs], obs.target_slots.len())?;
    let mut g = Graph::new();
    let vars = batch.record(&mut g);
    let (q, k, v) = net.qkv(&mut g, store, vars.own, vars.variant)?;
    Ok((g.value(q).clone(), g.value(k).clone(), g.value(v).clone()))
}

/// Scaled dot-product attention of a single query row over `K`, `V`.
/// An empty key set gives the zero vector.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let segments: Arc<[Segment]> = Arc::new([Segment {
        start: 0,
        len: k.rows(),
    }]);
    let out = g.segment_attention(qv, kv, vv, segments)?;
    Ok(g.value(out).clone())
}

/// Epsilon-greedy choice restricted to `mask`. Greedy ties go to the lowest
/// index.
pub fn select_action<R: Rng>(q: &[f64], mask: &[bool], epsilon: f64, rng: &mut R) -> Result<usize> {
    if q.len() != mask.len() {
        return Err(Error::dim("select_action", &[q.len()], &[mask.len()]));
    }
    let available: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
    if available.is_empty() {
        return Err(Error::Contract("availability mask admits no action".into()));
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(available[rng.gen_range(0..available.len())]);
    }
    Ok(greedy(q, mask).expect("mask is non-empty"))
}

/// Masked argmax with ties to the lowest index.
pub fn greedy(q: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (a, (&v, &ok)) in q.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|b| v > q[b]) {
            best = Some(a);
        }
    }
    best
}
