//! Run configuration, evaluation, checkpoints, metrics and transfer.

mod checkpoint;
mod config;
mod eval;
mod metrics;
pub mod selftest;
mod train;

use std::path::Path;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, LoadScope, FORMAT_VERSION, MAGIC,
};
pub use config::{ArenaSource, RunConfig};
pub use eval::{
    evaluate, evaluate_policy, EvalResult, GreedyAgents, RandomPolicy, ScriptedPolicy, TeamPolicy,
    EVAL_SEED_OFFSET,
};
pub use metrics::{
    mean_and_quartiles, read_metrics, CsvLog, MetricsRow, TransferRow, METRICS_HEADER,
};
pub use train::{
    train_run, train_run_with, transfer_protocol, RunDir, RunOutcome, SummaryRow, TransferTable,
};

use crate::agentnet::{AgentNet, AgentNetConfig};
use crate::arena::ArenaConfig;
use crate::error::Result;

/// The agent network a run config trains.
pub fn agent_net_for(config: &RunConfig) -> Result<AgentNet> {
    AgentNet::new(AgentNetConfig {
        d_k: config.widths.d_k,
        d_h: config.widths.d_h,
        abstraction: config.variant.abstraction(),
    })
}

/// Zero-shot evaluation result together with the number of parameter
/// updates performed while producing it.
#[derive(Clone, Debug)]
pub struct TransferEval {
    pub result: EvalResult,
    pub parameter_updates: u64,
}

/// Loads only the agent network from `checkpoint` and evaluates it greedily
/// on `arena`. Parameters are never modified.
pub fn transfer_eval(
    checkpoint: &Path,
    arena: &ArenaConfig,
    episodes: usize,
    seed: u64,
) -> Result<TransferEval> {
    let ck = load_checkpoint(checkpoint, LoadScope::AgentOnly)?;
    let net = agent_net_for(&ck.config)?;
    let before = ck.params.version();
    let result = evaluate(&net, &ck.params, arena, episodes, seed)?;
    Ok(TransferEval {
        result,
        parameter_updates: ck.params.version() - before,
    })
}
