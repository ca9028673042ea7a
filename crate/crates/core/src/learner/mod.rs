//! Centralised TD training of the agent network, relation encoder and
//! mixer from a buffer of whole episodes.

mod episode;
mod loss;
mod model;
mod replay;

pub use episode::{run_episode, EpisodeRecord};
pub use loss::{check_gamma, q_tot_taken, td_loss, td_loss_on, td_targets, PaddedBatch, TdLoss};
pub use model::{Model, Variant, Widths};
pub use replay::ReplayBuffer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arena::{Arena, ArenaConfig};
use crate::error::{Error, Result};
use crate::numerics::{clip_grad_norm, ParamStore, RmsProp, RmsPropConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Episodes between target refreshes.
    pub target_interval: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Environment steps over which epsilon decays linearly.
    pub epsilon_anneal_steps: u64,
    pub optimizer: RmsPropConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            gamma: 0.99,
            batch_size: 32,
            buffer_capacity: 5000,
            target_interval: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            optimizer: RmsPropConfig::default(),
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(Error::config(
                "buffer_capacity",
                "must be at least batch_size",
            ));
        }
        if self.target_interval == 0 {
            return Err(Error::config("target_interval", "must be positive"));
        }
        for (field, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        let o = &self.optimizer;
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.alpha) || !(o.eps > 0.0) {
            return Err(Error::config(
                "optimizer",
                "needs lr >= 0, alpha in [0, 1) and eps > 0",
            ));
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon_at(&self, env_steps: u64) -> f64 {
        if self.epsilon_anneal_steps == 0 {
            return self.epsilon_end;
        }
        let frac = (env_steps as f64 / self.epsilon_anneal_steps as f64).min(1.0);
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Summary of one collect-and-update iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Iteration {
    pub env_steps: u64,
    pub episode_len: usize,
    pub episode_return: f64,
    pub won: bool,
    pub epsilon: f64,
    /// Present when a gradient step was taken.
    pub loss: Option<f64>,
    pub mean_q_tot: Option<f64>,
}

/// Training seeds carry the top bit so they never collide with evaluation
/// seeds.
pub fn training_seed(run_seed: u64, episode: u64) -> u64 {
    (1 << 63) | ((run_seed & 0x7fff_ffff) << 32) | (episode & 0xffff_ffff)
}

/// Owns the online and target parameters, the optimizer and the buffer.
pub struct Learner {
    pub model: Model,
    config: LearnerConfig,
    arena: Arena,
    params: ParamStore,
    target: ParamStore,
    optimizer: RmsProp,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    seed: u64,
    env_steps: u64,
    episodes: u64,
    updates: u64,
}

impl Learner {
    pub fn new(
        variant: Variant,
        widths: &Widths,
        config: LearnerConfig,
        arena: ArenaConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let arena = Arena::new(arena)?;
        let model = Model::new(variant, widths, arena.n_agents(), arena.state_dim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = model.init(&mut rng);
        Self::with_params(model, config, arena, params, seed)
    }

    /// Starts from existing parameters, e.g. loaded from a checkpoint.
    pub fn with_params(
        model: Model,
        config: LearnerConfig,
        arena: Arena,
        params: ParamStore,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        model.agent.check(&params)?;
        Ok(Learner {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            optimizer: RmsProp::new(config.optimizer),
            target: params.clone(),
            params,
            model,
            config,
            arena,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fac_7104),
            seed,
            env_steps: 0,
            episodes: 0,
            updates: 0,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn target(&self) -> &ParamStore {
        &self.target
    }

    pub fn optimizer(&self) -> &RmsProp {
        &self.optimizer
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon_at(self.env_steps)
    }

    /// Restores optimizer state and counters, e.g. when resuming.
    pub fn restore(&mut self, optimizer: RmsProp, env_steps: u64, episodes: u64) {
        self.optimizer = optimizer;
        self.env_steps = env_steps;
        self.episodes = episodes;
    }

    /// Collects one episode, stores it, and takes one gradient step once
    /// the buffer holds a full batch. The target parameters are refreshed
    /// every `target_interval` episodes.
    pub fn iterate(&mut self) -> Result<Iteration> {
        let epsilon = self.epsilon();
        let seed = training_seed(self.seed, self.episodes);
        let record = run_episode(
            &mut self.arena,
            &self.model.agent,
            &self.params,
            epsilon,
            seed,
            &mut self.rng,
        )?;
        let (episode_len, episode_return, won) =
            (record.len(), record.episode_return(), record.won);
        self.env_steps += episode_len as u64;
        self.episodes += 1;
        self.buffer.insert(record);

        let (mut loss, mut mean_q_tot) = (None, None);
        if self.buffer.can_sample(self.config.batch_size) {
            let batch = self.buffer.sample(self.config.batch_size, &mut self.rng)?;
            let mut out = td_loss(
                &self.model,
                &self.params,
                &self.target,
                &batch,
                self.config.gamma,
            )?;
            if let Some(max_norm) = self.config.optimizer.grad_clip {
                clip_grad_norm(&mut out.grads, max_norm);
            }
            self.optimizer.step(&mut self.params, &out.grads)?;
            self.updates += 1;
            loss = Some(out.loss);
            mean_q_tot = Some(out.mean_q_tot);
        }
        if self.episodes.is_multiple_of(self.config.target_interval) {
            self.target = self.params.clone();
        }
        Ok(Iteration {
            env_steps: self.env_steps,
            episode_len,
            episode_return,
            won,
            epsilon,
            loss,
            mean_q_tot,
        })
    }
}
