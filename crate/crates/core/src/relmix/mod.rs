//! Relation-aware mixing: a visibility graph over the controlled agents, a
//! three-layer GCN that scores each agent, softmax relation weights, and a
//! monotone state-conditioned mixer.

mod graph;
mod mixer;

pub use graph::{build_adjacency, normalize_adjacency, normalized_blocks, VisibilityGraph};
pub use mixer::{MixerConfig, MixerKind, MonotoneMixer, MIXER_PREFIX};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Source of the per-agent relation weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Softmax over GCN scores.
    Gcn,
    /// Fixed weights `1/n`, still applied as `n * w_i * q_i`.
    Uniform,
    /// Per-agent Q-values go to the mixer untouched.
    None,
}

pub const GCN_PREFIX: &str = "gcn.";

/// Three graph convolutions with node-shared weights. Layers 0 and 1 use
/// ELU; layers 1 and 2 see the original node features concatenated to
/// their input. The last layer emits one logit per node.
#[derive(Clone, Debug)]
pub struct Gcn {
    pub d_in: usize,
    pub d_hidden: usize,
}

impl Gcn {
    pub fn new(d_in: usize, d_hidden: usize) -> Self {
        Gcn { d_in, d_hidden }
    }

    fn shapes(&self) -> [(&'static str, [usize; 2]); 3] {
        let (d, h) = (self.d_in, self.d_hidden);
        [
            ("gcn.w0", [d, h]),
            ("gcn.w1", [h + d, h]),
            ("gcn.w2", [h + d, 1]),
        ]
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for (name, shape) in self.shapes() {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            store.init_uniform(rng, name, &shape, bound);
        }
    }

    /// `x` holds `P` graphs of `n` nodes each, node-major within a graph;
    /// `blocks` holds the `P` normalised adjacency matrices back to back.
    /// Returns the `(P * n) x 1` logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        blocks: Arc<[f64]>,
        n: usize,
    ) -> Result<Var> {
        if g.value(x).cols() != self.d_in {
            return Err(Error::dim("gcn_forward", g.value(x).shape(), &[self.d_in]));
        }
        let [w0, w1, w2] = self.shapes().map(|(name, _)| name);
        let w0 = g.param_from(store, w0)?;
        let w1 = g.param_from(store, w1)?;
        let w2 = g.param_from(store, w2)?;

        let xw = g.matmul(x, w0)?;
        let h = g.block_propagate(blocks.clone(), n, xw)?;
        let h1 = g.elu(h);

        let cat = g.concat_cols(&[h1, x])?;
        let xw = g.matmul(cat, w1)?;
        let h = g.block_propagate(blocks.clone(), n, xw)?;
        let h2 = g.elu(h);

        let cat = g.concat_cols(&[h2, x])?;
        let xw = g.matmul(cat, w2)?;
        g.block_propagate(blocks, n, xw)
    }
}

/// GCN logits for a single graph, on plain tensors. `x` is `n x d_in`.
pub fn gcn_forward(gcn: &Gcn, store: &ParamStore, x: &Tensor, a_hat: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    if a_hat.shape() != [n, n] {
        return Err(Error::dim("gcn_forward", a_hat.shape(), &[n, n]));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = gcn.forward(&mut g, store, xv, a_hat.data().to_vec().into(), n)?;
    Ok(g.value(out).clone())
}

/// Softmax across the agents of one graph.
pub fn relation_weights(logits: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::matrix(1, logits.len(), logits.to_vec())?);
    let w = g.softmax_rows(v)?;
    Ok(g.value(w).data().to_vec())
}

/// Records relation weights `P x n` for the configured relation source.
/// `node_features` and `blocks` are only used by [`Relation::Gcn`].
#[allow(clippy::too_many_arguments)]
pub fn relation_weights_on(
    g: &mut Graph,
    relation: Relation,
    gcn: &Gcn,
    store: &ParamStore,
    node_features: Var,
    blocks: Arc<[f64]>,
    p: usize,
    n: usize,
) -> Result<Option<Var>> {
    match relation {
        Relation::None => Ok(None),
        Relation::Uniform => {
            let logits = g.constant(Tensor::zeros(&[p, n]));
            Ok(Some(g.softmax_rows(logits)?))
        }
        Relation::Gcn => {
            let h = gcn.forward(g, store, node_features, blocks, n)?;
            let h = g.reshape(h, vec![p, n])?;
            Ok(Some(g.softmax_rows(h)?))
        }
    }
}

/// Applies `q~ = n * w * q` when relation weights are present.
pub fn weight_q(g: &mut Graph, q: Var, w: Option<Var>) -> Result<Var> {
    match w {
        None => Ok(q),
        Some(w) => {
            let n = g.value(q).cols() as f64;
            let wq = g.mul(w, q)?;
            Ok(g.scale(wq, n))
        }
    }
}
