use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use raca_core::arena::ArenaConfig;
use raca_core::harness::{
    self, agent_net_for, evaluate, load_checkpoint, selftest, train_run_with, transfer_protocol,
    LoadScope, MetricsRow, RunConfig,
};
use raca_core::learner::Variant;
use raca_core::Error;

#[derive(Parser)]
#[command(
    name = "raca",
    version,
    about = "Relation-aware credit assignment for cooperative agents"
)]
struct Cli {
    /// Print the default run config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run (or one run per seed with --seeds).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run several seeds and aggregate them into summary.csv.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        total_steps: Option<u64>,
        /// Arena evaluated zero-shot at every evaluation; repeatable.
        #[arg(long)]
        transfer_arena: Vec<PathBuf>,
    },
    /// Score a checkpoint with greedy episodes on its own arena, or on
    /// --arena if given.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        arena: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score only the agent network of a checkpoint on another arena.
    TransferEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        arena: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the invariant suites.
    Selftest {
        /// Reduced sample counts.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} file not found: {}",
            path.display()
        )))
    }
}

fn print_row(seed: u64, r: &MetricsRow) {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.5}"));
    println!(
        "seed {seed} step {:>7} win {:.3} return {:.3} length {:.1} loss {} q_tot {} eps {:.3}",
        r.env_step,
        r.eval_win_rate,
        r.eval_return,
        r.eval_length,
        opt(r.train_loss),
        opt(r.mean_q_tot),
        r.epsilon
    );
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    seeds: Vec<u64>,
    out: Option<PathBuf>,
    variant: Option<Variant>,
    total_steps: Option<u64>,
    transfer_arena: Vec<PathBuf>,
    print_config: bool,
) -> Result<(), Failure> {
    let mut cfg = match &config {
        Some(p) => {
            require(p, "config")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if let Some(t) = total_steps {
        cfg.total_env_steps = t;
    }
    for p in &transfer_arena {
        require(p, "arena")?;
        cfg.transfer_arenas
            .push(harness::ArenaSource::Inline(Box::new(ArenaConfig::load(
                p,
            )?)));
    }
    cfg.validate()?;
    if print_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    if seeds.is_empty() {
        let run_seed = cfg.seed;
        let outcome = train_run_with(&cfg, out.as_deref(), |r| print_row(run_seed, r))?;
        println!(
            "finished: {} env steps, {} updates, best win rate {:.3}",
            outcome.final_checkpoint.env_steps,
            outcome.updates,
            outcome.best_win_rate()
        );
    } else {
        let test: Vec<ArenaConfig> = cfg
            .transfer_arenas
            .iter()
            .map(|a| a.resolve(None))
            .collect::<Result<_, _>>()?;
        cfg.transfer_arenas.clear();
        let table = transfer_protocol(&cfg, &test, &seeds, out.as_deref())?;
        for (seed, run) in table.seeds.iter().zip(&table.runs) {
            for r in &run.metrics {
                print_row(*seed, r);
            }
        }
        for row in &table.summary {
            println!(
                "{} #{:<3} step {:>9.0} win mean {:.3} [p25 {:.3}, p75 {:.3}] over {} seeds",
                row.arena,
                row.eval_index,
                row.env_step_mean,
                row.win_rate_mean,
                row.win_rate_p25,
                row.win_rate_p75,
                row.seeds
            );
        }
    }
    Ok(())
}

fn eval(
    checkpoint: PathBuf,
    arena: Option<PathBuf>,
    episodes: Option<usize>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    require(&checkpoint, "checkpoint")?;
    let ck = load_checkpoint(&checkpoint, LoadScope::Full)?;
    let arena_cfg = match &arena {
        Some(p) => {
            require(p, "arena")?;
            ArenaConfig::load(p)?
        }
        None => ck.config.arena_config()?,
    };
    let net = agent_net_for(&ck.config)?;
    let episodes = episodes.unwrap_or(ck.config.eval_episodes);
    let r = evaluate(
        &net,
        &ck.params,
        &arena_cfg,
        episodes,
        seed.unwrap_or(ck.config.seed),
    )?;
    println!(
        "win rate {:.4} mean return {:.4} mean length {:.2} over {episodes} episodes",
        r.win_rate, r.mean_return, r.mean_length
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let Some(command) = cli.command else {
        if cli.print_config {
            println!("{}", RunConfig::default().to_json_pretty());
            return Ok(());
        }
        return Err(Failure::Usage(
            "a subcommand is required (try --help)".into(),
        ));
    };
    match command {
        Command::Train {
            config,
            seed,
            seeds,
            out,
            variant,
            total_steps,
            transfer_arena,
        } => train(
            config,
            seed,
            seeds,
            out,
            variant,
            total_steps,
            transfer_arena,
            cli.print_config,
        ),
        _ if cli.print_config => {
            println!("{}", RunConfig::default().to_json_pretty());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            arena,
            episodes,
            seed,
        } => eval(checkpoint, arena, episodes, seed),
        Command::TransferEval {
            checkpoint,
            arena,
            episodes,
            seed,
        } => {
            require(&checkpoint, "checkpoint")?;
            require(&arena, "arena")?;
            let arena_cfg = ArenaConfig::load(&arena)?;
            let t = harness::transfer_eval(&checkpoint, &arena_cfg, episodes, seed)?;
            println!(
                "win rate {:.4} mean return {:.4} mean length {:.2} over {episodes} episodes (parameter updates: {})",
                t.result.win_rate, t.result.mean_return, t.result.mean_length, t.parameter_updates
            );
            Ok(())
        }
        Command::Selftest { quick, seed } => {
            let checks = selftest::run_all(seed, quick)?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Failure::Runtime(Error::Contract(format!(
                    "{failed} selftest check(s) failed"
                ))));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
