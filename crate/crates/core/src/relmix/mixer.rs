use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var, OUTPUT_GAIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    /// Hypernetwork mixer with non-negative weights.
    Qmix,
    /// Plain sum of the (weighted) agent values.
    Vdn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub d_mix: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            kind: MixerKind::Qmix,
            d_mix: 32,
        }
    }
}

pub const MIXER_PREFIX: &str = "mixer.";

const HYPER_W1: &str = "mixer.hyper_w1";
const HYPER_B1: &str = "mixer.hyper_b1";
const HYPER_W2: &str = "mixer.hyper_w2";
const V1: &str = "mixer.v1";
const V2: &str = "mixer.v2";

/// `Q_tot = |W2(s)|^T elu(|W1(s)|^T q + b1(s)) + V(s)`, with `W1`, `b1`,
/// `W2` single linear maps of the state and `V` a two-layer ReLU head.
#[derive(Clone, Debug)]
pub struct MonotoneMixer {
    pub config: MixerConfig,
    pub n_agents: usize,
    pub state_dim: usize,
}

impl MonotoneMixer {
    pub fn new(config: MixerConfig, n_agents: usize, state_dim: usize) -> Result<Self> {
        if config.d_mix == 0 {
            return Err(Error::config("d_mix", "must be positive"));
        }
        Ok(MonotoneMixer {
            config,
            n_agents,
            state_dim,
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        if self.config.kind == MixerKind::Vdn {
            return;
        }
        let (s, n, d) = (self.state_dim, self.n_agents, self.config.d_mix);
        store.init_linear(rng, HYPER_W1, s, n * d);
        store.init_linear(rng, HYPER_B1, s, d);
        store.init_linear_scaled(rng, HYPER_W2, s, d, OUTPUT_GAIN);
        store.init_linear(rng, V1, s, d);
        store.init_linear_scaled(rng, V2, d, 1, OUTPUT_GAIN);
    }

    fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
        let w = g.param_from(store, &format!("{name}.w"))?;
        let b = g.param_from(store, &format!("{name}.b"))?;
        g.linear(x, w, b)
    }

    /// Mixes `q: P x n` under states `s: P x state_dim` into `P x 1`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, s: Var) -> Result<Var> {
        let (p, n) = (g.value(q).rows(), g.value(q).cols());
        if n != self.n_agents {
            return Err(Error::dim("mix", g.value(q).shape(), &[p, self.n_agents]));
        }
        if self.config.kind == MixerKind::Vdn {
            return g.row_sum(q);
        }
        if g.value(s).shape() != [p, self.state_dim] {
            return Err(Error::dim("mix", g.value(s).shape(), &[p, self.state_dim]));
        }
        let w1 = Self::linear(g, store, HYPER_W1, s)?;
        let w1 = g.abs(w1);
        let b1 = Self::linear(g, store, HYPER_B1, s)?;
        let hidden = g.batched_vecmat(q, w1)?;
        let hidden = g.add(hidden, b1)?;
        let hidden = g.elu(hidden);
        let w2 = Self::linear(g, store, HYPER_W2, s)?;
        let w2 = g.abs(w2);
        let y = g.batched_vecmat(hidden, w2)?;
        let v = Self::linear(g, store, V1, s)?;
        let v = g.relu(v);
        let v = Self::linear(g, store, V2, v)?;
        g.add(y, v)
    }

    /// Single-sample convenience: `q` is the per-agent vector, `state` the
    /// global state.
    pub fn mix(
        &self,
        store: &ParamStore,
        q: &[f64],
        w: Option<&[f64]>,
        state: &[f64],
    ) -> Result<f64> {
        let mut g = Graph::new();
        let n = q.len();
        let qv = g.constant(Tensor::matrix(1, n, q.to_vec())?);
        let wv = match w {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::dim("mix", &[w.len()], &[n]));
                }
                Some(g.constant(Tensor::matrix(1, n, w.to_vec())?))
            }
            None => None,
        };
        let sv = g.constant(Tensor::matrix(1, state.len(), state.to_vec())?);
        let qt = super::weight_q(&mut g, qv, wv)?;
        let out = self.forward(&mut g, store, qt, sv)?;
        Ok(g.value(out).item())
    }
}
