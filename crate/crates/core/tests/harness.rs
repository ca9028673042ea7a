use std::path::Path;
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use raca_core::agentnet::AgentNet;
use raca_core::arena::ArenaConfig;
use raca_core::harness::{
    agent_net_for, evaluate, evaluate_policy, load_checkpoint, read_metrics, save_checkpoint,
    train_run, transfer_eval, transfer_protocol, ArenaSource, Checkpoint, LoadScope, RandomPolicy,
    RunConfig, ScriptedPolicy, FORMAT_VERSION, METRICS_HEADER,
};
use raca_core::learner::{LearnerConfig, Variant, Widths};
use raca_core::numerics::Tensor;
use raca_core::Error;

fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        widths: Widths {
            d_k: 8,
            d_h: 8,
            d_mix: 4,
            d_gcn: 4,
        },
        learner: LearnerConfig {
            batch_size: 4,
            target_interval: 5,
            epsilon_anneal_steps: 500,
            ..LearnerConfig::default()
        },
        total_env_steps: 400,
        eval_interval: 150,
        eval_episodes: 4,
        seed,
        ..RunConfig::default()
    }
}

fn trained_checkpoint() -> Checkpoint {
    train_run(&tiny_config(1), None).unwrap().final_checkpoint
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ck = trained_checkpoint();
    assert!(ck.optimizer.is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path, LoadScope::Full).unwrap();
    assert!(back.params.bit_eq(&ck.params));
    assert_eq!(back.config, ck.config);
    assert_eq!(back.env_steps, ck.env_steps);
    assert_eq!(back.episodes, ck.episodes);
    let (sa, ta) = ck.optimizer.as_ref().unwrap();
    let (sb, tb) = back.optimizer.as_ref().unwrap();
    assert_eq!(sa, sb);
    assert_eq!(ta.len(), tb.len());
    for ((na, a), (nb, b)) in ta.iter().zip(tb) {
        assert_eq!(na, nb);
        assert!(a.bit_eq(b));
    }
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn truncated_or_damaged_checkpoints_are_rejected() {
    let bytes = trained_checkpoint().to_bytes().unwrap();
    for cut in [bytes.len() - 1, bytes.len() - 4, bytes.len() / 2, 20, 13] {
        let err = Checkpoint::from_bytes(&bytes[..cut], LoadScope::Full).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "cut at {cut}: {err}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(matches!(
        Checkpoint::from_bytes(&flipped, LoadScope::Full),
        Err(Error::Checksum { .. })
    ));
    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&version, LoadScope::Full),
        Err(Error::Version { found, .. }) if found == FORMAT_VERSION + 1
    ));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&magic, LoadScope::Full),
        Err(Error::Corrupt(_))
    ));
}

#[test]
fn failed_save_leaves_previous_file_intact() {
    let ck = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("keep.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let before = std::fs::read(&path).unwrap();
    let bad = dir.path().join("missing-dir").join("x").join("");
    assert!(save_checkpoint(&ck, &bad).is_err());
    assert_eq!(std::fs::read(&path).unwrap(), before);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn agent_only_load_has_no_mixer_or_relation_tensors() {
    let ck = trained_checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let partial = Checkpoint::from_bytes(&bytes, LoadScope::AgentOnly).unwrap();
    assert!(partial.optimizer.is_none());
    assert!(partial.params.names().all(|n| n.starts_with("agent.")));
    assert!(ck.params.names().any(|n| n.starts_with("mixer.")));
    assert!(ck.params.names().any(|n| n.starts_with("gcn.")));
    let net = agent_net_for(&partial.config).unwrap();
    let arena = ArenaConfig::rangers(4, 4);
    let a = evaluate(&net, &partial.params, &arena, 3, 0).unwrap();
    let b = evaluate(&net, &ck.params, &arena, 3, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn transfer_eval_performs_no_updates() {
    let ck = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let target = ArenaConfig::with_teams(
        vec![raca_core::arena::UnitSpec::ranger(); 5],
        vec![raca_core::arena::UnitSpec::bruiser(); 2],
    );
    let t = transfer_eval(&path, &target, 4, 2).unwrap();
    assert_eq!(t.parameter_updates, 0);
    let net = agent_net_for(&ck.config).unwrap();
    assert_eq!(t.result, evaluate(&net, &ck.params, &target, 4, 2).unwrap());
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let ck = trained_checkpoint();
    let net = agent_net_for(&ck.config).unwrap();
    let arena = ArenaConfig::rangers(3, 3);
    let a = evaluate(&net, &ck.params, &arena, 8, 4).unwrap();
    let b = evaluate(&net, &ck.params, &arena, 8, 4).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.win_rate));
    assert!(matches!(
        evaluate(&net, &ck.params, &arena, 0, 4),
        Err(Error::Config { .. })
    ));
}

#[test]
fn dead_enemies_mean_certain_victory() {
    let mut arena = ArenaConfig::rangers(3, 3);
    arena.enemies_start_dead = true;
    let ck = trained_checkpoint();
    let net = agent_net_for(&ck.config).unwrap();
    assert_eq!(
        evaluate(&net, &ck.params, &arena, 5, 0).unwrap().win_rate,
        1.0
    );
}

#[test]
fn untrained_agents_lose_to_scripted_baseline() {
    let arena = ArenaConfig::rangers(3, 3);
    let net = AgentNet::new(Default::default()).unwrap();
    let mut params = raca_core::numerics::ParamStore::new();
    net.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
    let untrained = evaluate(&net, &params, &arena, 32, 0).unwrap();
    let scripted = evaluate_policy(&mut ScriptedPolicy, &arena, 32, 0).unwrap();
    let random = evaluate_policy(&mut RandomPolicy::new(0), &arena, 32, 0).unwrap();
    assert!(
        untrained.win_rate < scripted.win_rate,
        "{untrained:?} vs {scripted:?}"
    );
    assert!(random.win_rate < scripted.win_rate);
}

#[test]
fn incompatible_agent_parameters_give_a_shape_diagnostic() {
    let mut ck = trained_checkpoint();
    ck.params.insert("agent.query.w", Tensor::zeros(&[6, 8]));
    let net = agent_net_for(&ck.config).unwrap();
    let err = evaluate(&net, &ck.params, &ArenaConfig::rangers(3, 3), 1, 0).unwrap_err();
    match err {
        Error::Shape(msg) => assert!(msg.contains("agent.query"), "{msg}"),
        other => panic!("expected shape error, got {other}"),
    }
}

#[test]
fn training_writes_monotone_metrics_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = tiny_config(5);
    let ra = train_run(&cfg, Some(&a)).unwrap();
    train_run(&cfg, Some(&b)).unwrap();
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    let header = String::from_utf8(ma).unwrap();
    assert_eq!(header.lines().next().unwrap(), METRICS_HEADER.join(","));
    let rows = read_metrics(&a.join("metrics.csv")).unwrap();
    assert_eq!(rows, ra.metrics);
    assert!(rows.windows(2).all(|w| w[0].env_step < w[1].env_step));
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.eval_win_rate)));
    assert!(rows.last().unwrap().env_step >= cfg.total_env_steps);
    let latest = load_checkpoint(&a.join("latest.ckpt"), LoadScope::Full).unwrap();
    assert!(latest.params.bit_eq(&ra.final_checkpoint.params));
    let echoed = RunConfig::load(&a.join("config.json")).unwrap();
    assert_eq!(echoed, cfg.inlined(None).unwrap());
}

#[test]
fn every_variant_trains_from_the_same_config() {
    for variant in Variant::ALL {
        let cfg = RunConfig {
            variant,
            total_env_steps: 150,
            ..tiny_config(2)
        };
        let out = train_run(&cfg, None).unwrap();
        assert!(out.updates > 0, "{}", variant.name());
    }
}

#[test]
fn transfer_protocol_aggregates_seeds() {
    let base = RunConfig {
        total_env_steps: 200,
        eval_interval: 100,
        ..tiny_config(0)
    };
    let test = vec![ArenaConfig::rangers(4, 4)];
    let dir = tempfile::tempdir().unwrap();
    let table = transfer_protocol(&base, &test, &[0, 1], Some(dir.path())).unwrap();
    assert_eq!(table.runs.len(), 2);
    assert!(dir.path().join("seed_1").join("transfer.csv").is_file());
    assert!(dir.path().join("summary.csv").is_file());
    let first = table.summary.iter().find(|r| r.arena == "0").unwrap();
    assert_eq!(first.seeds, 2);
    assert!(first.win_rate_p25 <= first.win_rate_p75);
}

#[test]
fn run_config_json_contract() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.eval_interval, 10_000);
    assert_eq!(cfg.eval_episodes, 32);
    let text = cfg.to_json_pretty();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    assert!(matches!(
        RunConfig::from_json("{\"bogus\": 1}"),
        Err(Error::Json(_))
    ));
    assert!(matches!(
        RunConfig::from_json("{\"eval_episodes\": 0}"),
        Err(Error::Config { .. })
    ));
    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    assert_eq!(names, ["raca", "qmix_attn", "qmix_gcn", "qmix", "vdn_attn"]);
    let v: RunConfig = RunConfig::from_json("{\"variant\": \"vdn_attn\"}").unwrap();
    assert_eq!(v.variant, Variant::VdnAttn);
}

#[test]
fn arena_paths_resolve_relative_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let arena = ArenaConfig::rangers(2, 3);
    std::fs::write(
        dir.path().join("a.json"),
        serde_json::to_string(&arena).unwrap(),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        "{\"arena\": \"a.json\", \"transfer_arenas\": [\"a.json\"]}",
    )
    .unwrap();
    let cfg = RunConfig::load(&dir.path().join("run.json")).unwrap();
    assert_eq!(cfg.arena, ArenaSource::Inline(Box::new(arena.clone())));
    assert_eq!(cfg.transfer_arenas.len(), 1);
    assert_eq!(cfg.model().unwrap().n_agents(), 2);
}

fn raca(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_raca"))
        .args(args)
        .output()
        .unwrap()
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn cli_usage_errors_exit_with_two() {
    assert_eq!(raca(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(raca(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        raca(&["train", "--config", "/nonexistent/c.json"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        raca(&[
            "transfer-eval",
            "--checkpoint",
            "/nonexistent.ckpt",
            "--arena",
            "x.json"
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn cli_prints_default_config() {
    let out = raca(&["--print-config"]);
    assert!(out.status.success());
    let cfg = RunConfig::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn cli_train_eval_and_transfer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    write_json(&cfg_path, &tiny_config(0));
    let out_dir = dir.path().join("runs").join("r3");
    let out = raca(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("metrics.csv").is_file());
    let ck = out_dir.join("latest.ckpt");
    assert_eq!(
        load_checkpoint(&ck, LoadScope::Full).unwrap().config.seed,
        3
    );

    let arena_path = dir.path().join("4v4.json");
    write_json(&arena_path, &ArenaConfig::rangers(4, 4));
    let out = raca(&[
        "transfer-eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--arena",
        arena_path.to_str().unwrap(),
        "--episodes",
        "32",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("win rate") && text.contains("32 episodes"),
        "{text}"
    );
    assert!(text.contains("parameter updates: 0"), "{text}");

    let out = raca(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--episodes",
        "2",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let bytes = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let out = raca(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}
