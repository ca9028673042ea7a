use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;

use super::EpisodeRecord;
use crate::error::{Error, Result};

/// FIFO store of whole episodes with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer_capacity", "must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(1024)),
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn can_sample(&self, batch: usize) -> bool {
        batch > 0 && self.episodes.len() >= batch
    }

    /// Inserts an episode, evicting the oldest when full.
    pub fn insert(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn get(&self, i: usize) -> Option<&EpisodeRecord> {
        self.episodes.get(i)
    }

    /// Indices of `batch` distinct episodes drawn uniformly.
    pub fn sample_indices<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if !self.can_sample(batch) {
            return Err(Error::Contract(format!(
                "cannot sample {batch} episodes from a buffer of {}",
                self.episodes.len()
            )));
        }
        Ok(sample(rng, self.episodes.len(), batch).into_vec())
    }

    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<&EpisodeRecord>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect())
    }
}
