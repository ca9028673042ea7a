use std::path::{Path, PathBuf};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::eval::{evaluate, EvalResult};
use super::metrics::{mean_and_quartiles, CsvLog, MetricsRow, TransferRow};
use super::RunConfig;
use crate::arena::ArenaConfig;
use crate::error::{Error, Result};
use crate::learner::Learner;

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub metrics: Vec<MetricsRow>,
    pub transfer: Vec<TransferRow>,
    pub final_checkpoint: Checkpoint,
    pub updates: u64,
}

impl RunOutcome {
    pub fn best_win_rate(&self) -> f64 {
        self.metrics
            .iter()
            .map(|r| r.eval_win_rate)
            .fold(0.0, f64::max)
    }
}

/// Output locations of a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn transfer(&self) -> PathBuf {
        self.root.join("transfer.csv")
    }
    pub fn latest(&self) -> PathBuf {
        self.root.join("latest.ckpt")
    }
    pub fn diverged(&self) -> PathBuf {
        self.root.join("diverged.ckpt")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
}

/// Trains per `config`, evaluating every `eval_interval` env steps on the
/// training arena and zero-shot on each transfer arena. With `out` set,
/// metrics CSVs and checkpoints are written there.
pub fn train_run(config: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    train_run_with(config, out, |_| {})
}

/// [`train_run`] with a callback invoked after every evaluation.
pub fn train_run_with(
    config: &RunConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<RunOutcome> {
    let config = config.inlined(None)?;
    config.validate()?;
    let arena = config.arena_config()?;
    let transfer: Vec<ArenaConfig> = config
        .transfer_arenas
        .iter()
        .map(|a| a.resolve(None))
        .collect::<Result<_>>()?;
    let dir = out.map(|p| RunDir {
        root: p.to_path_buf(),
    });
    let (mut metrics_log, mut transfer_log) = (None, None);
    if let Some(d) = &dir {
        std::fs::create_dir_all(&d.root)?;
        super::metrics::write_text(&d.config(), &config.to_json_pretty())?;
        metrics_log = Some(CsvLog::create(&d.metrics())?);
        if !transfer.is_empty() {
            transfer_log = Some(CsvLog::create(&d.transfer())?);
        }
    }

    let mut learner = Learner::new(
        config.variant,
        &config.widths,
        config.learner.clone(),
        arena.clone(),
        config.seed,
    )?;
    let mut rows = Vec::new();
    let mut transfer_rows = Vec::new();
    let (mut loss_sum, mut q_sum, mut n_updates) = (0.0, 0.0, 0u64);
    let mut next_eval = 0;
    while learner.env_steps() < config.total_env_steps {
        let it = match learner.iterate() {
            Ok(it) => it,
            Err(e @ Error::Divergence { .. }) => {
                if let Some(d) = &dir {
                    let ck = Checkpoint::new(
                        config.clone(),
                        learner.env_steps(),
                        learner.episodes(),
                        learner.params().clone(),
                    );
                    save_checkpoint(&ck, &d.diverged())?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let (Some(l), Some(q)) = (it.loss, it.mean_q_tot) {
            loss_sum += l;
            q_sum += q;
            n_updates += 1;
        }
        let last = learner.env_steps() >= config.total_env_steps;
        if learner.env_steps() < next_eval && !last {
            continue;
        }
        while next_eval <= learner.env_steps() {
            next_eval += config.eval_interval;
        }
        let step = learner.env_steps();
        let agent = &learner.model.agent;
        let eval = evaluate(
            agent,
            learner.params(),
            &arena,
            config.eval_episodes,
            config.seed,
        )?;
        let row = MetricsRow {
            env_step: step,
            train_loss: (n_updates > 0).then(|| loss_sum / n_updates as f64),
            mean_q_tot: (n_updates > 0).then(|| q_sum / n_updates as f64),
            eval_win_rate: eval.win_rate,
            eval_return: eval.mean_return,
            eval_length: eval.mean_length,
            epsilon: learner.epsilon(),
        };
        (loss_sum, q_sum, n_updates) = (0.0, 0.0, 0);
        if let Some(log) = metrics_log.as_mut() {
            log.metrics(&row)?;
        }
        for (k, t) in transfer.iter().enumerate() {
            let r: EvalResult = evaluate(
                agent,
                learner.params(),
                t,
                config.eval_episodes,
                config.seed,
            )?;
            let tr = TransferRow {
                env_step: step,
                arena: k,
                win_rate: r.win_rate,
                mean_return: r.mean_return,
                mean_length: r.mean_length,
            };
            if let Some(log) = transfer_log.as_mut() {
                log.write(&tr)?;
            }
            transfer_rows.push(tr);
        }
        progress(&row);
        let reached = config
            .stop_at_win_rate
            .is_some_and(|w| row.eval_win_rate >= w);
        rows.push(row);
        if let Some(d) = &dir {
            save_checkpoint(&snapshot(&config, &learner), &d.latest())?;
        }
        if reached {
            break;
        }
    }
    Ok(RunOutcome {
        metrics: rows,
        transfer: transfer_rows,
        final_checkpoint: snapshot(&config, &learner),
        updates: learner.updates(),
    })
}

fn snapshot(config: &RunConfig, learner: &Learner) -> Checkpoint {
    Checkpoint::new(
        config.clone(),
        learner.env_steps(),
        learner.episodes(),
        learner.params().clone(),
    )
    .with_optimizer(learner.optimizer())
}

/// One row of an aggregated multi-seed curve.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SummaryRow {
    /// `"train"` or the index of a transfer arena.
    pub arena: String,
    pub eval_index: usize,
    pub env_step_mean: f64,
    pub win_rate_mean: f64,
    pub win_rate_p25: f64,
    pub win_rate_p75: f64,
    pub seeds: usize,
}

/// Per-seed outcomes plus mean and 25-75 percentile bands.
#[derive(Clone, Debug)]
pub struct TransferTable {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunOutcome>,
    pub summary: Vec<SummaryRow>,
}

/// Trains on `train` once per seed and evaluates the agent network zero-shot
/// on `test` at every evaluation point. Curves are aligned by evaluation
/// index; runs that stopped early contribute to the points they reached.
pub fn transfer_protocol(
    base: &RunConfig,
    test: &[ArenaConfig],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<TransferTable> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.transfer_arenas = test
            .iter()
            .map(|a| super::ArenaSource::Inline(Box::new(a.clone())))
            .collect();
        let dir = out.map(|o| o.join(format!("seed_{seed}")));
        runs.push(train_run(&cfg, dir.as_deref())?);
    }
    let summary = summarise(&runs, test.len());
    if let Some(o) = out {
        let mut log = CsvLog::create(&o.join("summary.csv"))?;
        for row in &summary {
            log.write(row)?;
        }
    }
    Ok(TransferTable {
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}

fn summarise(runs: &[RunOutcome], n_test: usize) -> Vec<SummaryRow> {
    let longest = runs.iter().map(|r| r.metrics.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for arena in std::iter::once(None).chain((0..n_test).map(Some)) {
        for idx in 0..longest {
            let mut steps = Vec::new();
            let mut wins = Vec::new();
            for r in runs {
                let Some(m) = r.metrics.get(idx) else {
                    continue;
                };
                steps.push(m.env_step as f64);
                let w = match arena {
                    None => Some(m.eval_win_rate),
                    Some(k) => r
                        .transfer
                        .iter()
                        .find(|t| t.env_step == m.env_step && t.arena == k)
                        .map(|t| t.win_rate),
                };
                wins.extend(w);
            }
            let (mean, p25, p75) = mean_and_quartiles(&wins);
            out.push(SummaryRow {
                arena: arena.map_or("train".into(), |k| k.to_string()),
                eval_index: idx,
                env_step_mean: steps.iter().sum::<f64>() / steps.len().max(1) as f64,
                win_rate_mean: mean,
                win_rate_p25: p25,
                win_rate_p75: p75,
                seeds: wins.len(),
            });
        }
    }
    out
}
