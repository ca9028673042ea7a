use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Init gain for layers that produce values (Q heads, mixer outputs).
pub const OUTPUT_GAIN: f64 = 0.05;

/// Named collection of every learnable tensor, with a version counter that
/// advances on each optimizer update.
///
/// Names are dotted paths whose first component is the owning network:
/// `agent.*`, `gcn.*` or `mixer.*`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Copy of the tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            version: self.version,
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Same names, shapes and bit patterns. The version is ignored.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// Adds a `fan_in x fan_out` weight and a `fan_out` bias under
    /// `{prefix}.w` / `{prefix}.b`, uniformly initialised in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_linear<R: Rng>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) {
        self.init_linear_scaled(rng, prefix, fan_in, fan_out, 1.0);
    }

    /// Like [`init_linear`](Self::init_linear) with both bounds multiplied by
    /// `gain`. Output heads use [`OUTPUT_GAIN`] so that initial values start
    /// near zero.
    pub fn init_linear_scaled<R: Rng>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        self.init_uniform(rng, &format!("{prefix}.w"), &[fan_in, fan_out], bound);
        self.init_uniform(rng, &format!("{prefix}.b"), &[fan_out], bound);
    }

    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, name: &str, shape: &[usize], bound: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape product"),
        );
    }
}
