use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsPropConfig {
    pub lr: f64,
    /// Smoothing constant of the squared-gradient moving average.
    pub alpha: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before each update; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 5e-4,
            alpha: 0.99,
            eps: 1e-5,
            grad_clip: Some(10.0),
        }
    }
}

/// RMSProp state: `E[g^2] <- alpha E[g^2] + (1 - alpha) g^2`,
/// `theta <- theta - lr g / sqrt(E[g^2] + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    accum: BTreeMap<String, Vec<f64>>,
    steps: u64,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        RmsProp {
            config,
            accum: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn accumulator(&self, name: &str) -> Option<&[f64]> {
        self.accum.get(name).map(Vec::as_slice)
    }

    /// Accumulators as tensors shaped like their parameters, for checkpoints.
    pub fn state_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        self.accum
            .iter()
            .filter_map(|(k, v)| {
                let shape = params.get(k).ok()?.shape().to_vec();
                Some((k.clone(), Tensor::new(shape, v.clone()).ok()?))
            })
            .collect()
    }

    pub fn restore(config: RmsPropConfig, steps: u64, state: Vec<(String, Tensor)>) -> Self {
        RmsProp {
            config,
            accum: state.into_iter().map(|(k, t)| (k, t.into_vec())).collect(),
            steps,
        }
    }

    /// Applies one update to every tensor in `params`. Parameters without an
    /// entry in `grads` receive a zero gradient. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Divergence { name: name.clone() });
            }
            let p = params.get(name)?;
            if p.len() != g.len() {
                return Err(Error::dim("rmsprop", p.shape(), g.shape()));
            }
        }
        let RmsPropConfig { lr, alpha, eps, .. } = self.config;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let p = params.get_mut(&name).expect("listed name");
            let acc = self
                .accum
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let g = grads.get(&name);
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                acc[i] = alpha * acc[i] + (1.0 - alpha) * gi * gi;
                data[i] -= lr * gi / (acc[i] + eps).sqrt();
            }
        }
        self.steps += 1;
        params.bump_version();
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
