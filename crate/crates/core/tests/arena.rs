use std::io::Write;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use raca_core::arena::script::{self, Intent};
use raca_core::arena::{
    visible, Arena, ArenaConfig, EntityRef, Side, Spawn, TraceWriter, Unit, UnitSpec, UnitType,
    ACTION_EAST, ACTION_NOOP, ACTION_NORTH, ACTION_SOUTH, ACTION_STOP, ACTION_WEST,
    N_BASIC_ACTIONS,
};
use raca_core::Error;

fn fixed(allies: Vec<(i32, i32)>, enemies: Vec<(i32, i32)>) -> ArenaConfig {
    let mut cfg = ArenaConfig::rangers(allies.len(), enemies.len());
    cfg.spawn = Some(Spawn::Fixed { allies, enemies });
    cfg
}

fn raw_rewards(mut cfg: ArenaConfig) -> ArenaConfig {
    cfg.reward.normalize = false;
    cfg
}

fn unit(side: Side, x: i32, y: i32) -> Unit {
    let spec = UnitSpec::ranger();
    Unit {
        health: spec.max_health,
        shield: spec.max_shield,
        spec,
        side,
        x,
        y,
        alive: true,
    }
}

#[test]
fn stopping_out_of_range_pays_nothing_and_continues() {
    let mut arena = Arena::new(fixed(vec![(0, 0)], vec![(20, 20)])).unwrap();
    arena.reset(0).unwrap();
    let (out, _) = arena.step(&[ACTION_STOP]).unwrap();
    assert_eq!(out.reward, 0.0);
    assert!(!out.terminated && !out.won);
}

#[test]
fn killing_the_last_enemy_pays_damage_kill_and_win() {
    let mut cfg = raw_rewards(fixed(vec![(5, 5)], vec![(8, 5)]));
    let dmg = cfg.allies[0].damage_or_heal;
    cfg.enemies[0].max_health = dmg;
    let mut arena = Arena::new(cfg.clone()).unwrap();
    arena.reset(0).unwrap();
    let (out, _) = arena.step(&[N_BASIC_ACTIONS]).unwrap();
    let r = &cfg.reward;
    assert_eq!(
        out.reward,
        dmg * r.damage_weight + r.kill_bonus + r.win_bonus
    );
    assert!(out.terminated && out.won && !out.truncated);
}

#[test]
fn normalised_maximum_return_is_one() {
    let mut cfg = fixed(vec![(5, 5)], vec![(8, 5)]);
    cfg.enemies[0].max_health = cfg.allies[0].damage_or_heal;
    let mut arena = Arena::new(cfg).unwrap();
    arena.reset(0).unwrap();
    let (out, _) = arena.step(&[N_BASIC_ACTIONS]).unwrap();
    assert!((out.reward - 1.0).abs() < 1e-12);
}

#[test]
fn win_pays_strictly_more_than_a_loss_with_equal_damage() {
    // One step, same damage dealt: the first arena's enemy dies, the second
    // arena's enemy survives while its target falls.
    let mut win = raw_rewards(fixed(vec![(5, 5)], vec![(8, 5)]));
    win.enemies[0].max_health = 6.0;
    win.allies[0].damage_or_heal = 6.0;
    let mut loss = win.clone();
    loss.enemies[0].max_health = 100.0;
    loss.allies[0].max_health = 1.0;
    let mut a = Arena::new(win).unwrap();
    let mut b = Arena::new(loss).unwrap();
    a.reset(0).unwrap();
    b.reset(0).unwrap();
    let (wa, _) = a.step(&[N_BASIC_ACTIONS]).unwrap();
    let (wb, _) = b.step(&[N_BASIC_ACTIONS]).unwrap();
    assert_eq!(wa.damage, wb.damage);
    assert!(wa.won && wb.terminated && !wb.won);
    assert!(wa.reward > wb.reward);
}

#[test]
fn step_limit_truncates_without_a_win() {
    let mut cfg = fixed(vec![(0, 0)], vec![(31, 31)]);
    cfg.max_steps = 3;
    let mut arena = Arena::new(cfg).unwrap();
    arena.reset(0).unwrap();
    for t in 1..=3 {
        let (out, _) = arena.step(&[ACTION_STOP]).unwrap();
        assert_eq!(out.terminated, t == 3);
        assert_eq!(out.truncated, t == 3);
        assert!(!out.won);
    }
    assert!(matches!(
        arena.step(&[ACTION_STOP]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn visibility_is_a_closed_ball_and_needs_both_alive() {
    let sight = UnitSpec::ranger().sight_range;
    let me = unit(Side::Ally, 0, 0);
    let same_cell = unit(Side::Enemy, 0, 0);
    assert!(visible(&me, &same_cell));
    let edge = unit(Side::Enemy, sight as i32, 0);
    assert_eq!(me.distance(&edge), sight);
    assert!(visible(&me, &edge));
    let beyond = unit(Side::Enemy, sight as i32 + 1, 0);
    assert!(!visible(&me, &beyond));
    let mut dead = edge.clone();
    dead.alive = false;
    dead.health = 0.0;
    assert!(!visible(&me, &dead));
}

#[test]
fn lone_agent_out_of_sight_has_no_variant_rows() {
    let mut arena = Arena::new(fixed(vec![(0, 0)], vec![(31, 31)])).unwrap();
    let snap = arena.reset(7).unwrap();
    assert!(snap.observations[0].variant.is_empty());
    assert!(!arena.visibility(0, EntityRef::Enemy(0)));
}

#[test]
fn enemy_attacks_the_lower_index_ally_on_a_distance_tie() {
    let units = vec![
        unit(Side::Ally, 7, 10),
        unit(Side::Ally, 13, 10),
        unit(Side::Enemy, 10, 10),
    ];
    assert_eq!(script::attack_nearest(2, &units), Intent::Attack(0));
    let mut arena = Arena::new(fixed(vec![(7, 10), (13, 10)], vec![(10, 10)])).unwrap();
    arena.reset(0).unwrap();
    arena.step(&[ACTION_STOP, ACTION_STOP]).unwrap();
    let full = UnitSpec::ranger().max_health;
    assert!(arena.ally(0).health < full);
    assert_eq!(arena.ally(1).health, full);
}

#[test]
fn enemy_move_ties_prefer_north_then_south_then_east_then_west() {
    // Target diagonally south-west: S and W both close the gap equally.
    let units = vec![unit(Side::Ally, 0, 0), unit(Side::Enemy, 20, 20)];
    let Intent::Move(d) = script::attack_nearest(1, &units) else {
        panic!("expected a move");
    };
    assert_eq!(d, ACTION_SOUTH - 2);
    // Target diagonally north-east: N wins over E.
    let units = vec![unit(Side::Ally, 30, 30), unit(Side::Enemy, 20, 20)];
    assert_eq!(
        script::attack_nearest(1, &units),
        Intent::Move(ACTION_NORTH - 2)
    );
}

#[test]
fn enemy_with_no_living_ally_stops() {
    let mut gone = unit(Side::Ally, 0, 0);
    gone.alive = false;
    gone.health = 0.0;
    let units = vec![gone, unit(Side::Enemy, 5, 5)];
    assert_eq!(script::attack_nearest(1, &units), Intent::Stop);
}

#[test]
fn masks_admit_an_action_and_dead_agents_only_noop() {
    let mut cfg = ArenaConfig::rangers(3, 3);
    cfg.max_steps = 40;
    let mut arena = Arena::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut saw_dead = false;
    for ep in 0..20 {
        let mut snap = arena.reset(ep).unwrap();
        loop {
            for (i, m) in snap.masks.iter().enumerate() {
                assert!(m.iter().any(|&b| b));
                if arena.ally(i).alive {
                    assert!(!m[ACTION_NOOP] && m[ACTION_STOP]);
                } else {
                    saw_dead = true;
                    assert_eq!(m.iter().filter(|&&b| b).count(), 1);
                    assert!(m[ACTION_NOOP]);
                }
            }
            for u in arena.units() {
                assert!(u.health >= 0.0 && u.shield >= 0.0);
            }
            let acts = script::random_actions(&snap.masks, &mut rng);
            let (out, next) = arena.step(&acts).unwrap();
            snap = next;
            if out.terminated {
                break;
            }
        }
    }
    assert!(saw_dead);
}

#[test]
fn features_stay_in_range_for_every_unit_type() {
    let cfg = ArenaConfig::with_teams(
        vec![UnitSpec::ranger(), UnitSpec::bruiser(), UnitSpec::medic()],
        vec![UnitSpec::bruiser(), UnitSpec::ranger(), UnitSpec::medic()],
    );
    let mut arena = Arena::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let state_dim = arena.state_dim();
    for ep in 0..10 {
        let mut snap = arena.reset(ep).unwrap();
        loop {
            assert_eq!(snap.state.len(), state_dim);
            for o in &snap.observations {
                assert!(o.variant.len() <= 2 + 3);
                assert!(o.own.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(o.invariant.iter().all(|v| (0.0..=1.0).contains(v)));
                for row in &o.variant {
                    assert!((0.0..=1.0).contains(&row[1]));
                    assert!((-1.0..=1.0).contains(&row[2]) && (-1.0..=1.0).contains(&row[3]));
                    assert!(row[4..].iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
            let acts = script::random_actions(&snap.masks, &mut rng);
            let (out, next) = arena.step(&acts).unwrap();
            snap = next;
            if out.terminated {
                break;
            }
        }
    }
}

#[test]
fn shield_is_spent_before_health() {
    let mut cfg = fixed(vec![(5, 5)], vec![(6, 5)]);
    cfg.enemies[0] = UnitSpec::bruiser();
    cfg.max_steps = 100;
    let mut arena = Arena::new(cfg.clone()).unwrap();
    arena.reset(0).unwrap();
    let dmg = cfg.allies[0].damage_or_heal;
    let shield = cfg.enemies[0].max_shield;
    let full = cfg.enemies[0].max_health;
    let mut dealt = 0.0;
    while dealt + dmg <= shield {
        arena.step(&[N_BASIC_ACTIONS]).unwrap();
        dealt += dmg;
        assert_eq!(arena.enemy(0).health, full);
        assert_eq!(arena.enemy(0).shield, shield - dealt);
    }
    arena.step(&[N_BASIC_ACTIONS]).unwrap();
    assert_eq!(arena.enemy(0).shield, 0.0);
    assert_eq!(arena.enemy(0).health, full - (dealt + dmg - shield));
}

#[test]
fn moves_into_occupied_cells_or_off_grid_leave_the_unit_in_place() {
    let mut arena = Arena::new(fixed(vec![(0, 0), (1, 0)], vec![(31, 31)])).unwrap();
    arena.reset(0).unwrap();
    arena.step(&[ACTION_EAST, ACTION_STOP]).unwrap();
    assert_eq!((arena.ally(0).x, arena.ally(0).y), (0, 0));
    arena.step(&[ACTION_WEST, ACTION_STOP]).unwrap();
    assert_eq!((arena.ally(0).x, arena.ally(0).y), (0, 0));
    arena.step(&[ACTION_NORTH, ACTION_STOP]).unwrap();
    assert_eq!((arena.ally(0).x, arena.ally(0).y), (0, 1));
}

#[test]
fn unavailable_action_names_agent_and_action() {
    let mut arena = Arena::new(fixed(vec![(0, 0), (1, 1)], vec![(31, 31)])).unwrap();
    arena.reset(0).unwrap();
    let err = arena.step(&[ACTION_STOP, N_BASIC_ACTIONS]).unwrap_err();
    assert!(
        matches!(err, Error::UnavailableAction { agent: 1, action: a } if a == N_BASIC_ACTIONS)
    );
    assert!(err.to_string().contains('1'));
}

#[test]
fn invalid_configs_name_the_offending_field() {
    let mut cfg = ArenaConfig::rangers(3, 3);
    cfg.max_steps = 0;
    let err = Arena::new(cfg).err().unwrap();
    assert!(err.to_string().contains("max_steps"), "{err}");

    let cfg = ArenaConfig::rangers(17, 3);
    let err = Arena::new(cfg).err().unwrap();
    assert!(err.to_string().contains("allies"), "{err}");

    let mut cfg = ArenaConfig::rangers(2, 2);
    cfg.spawn = Some(Spawn::Fixed {
        allies: vec![(0, 0)],
        enemies: vec![(5, 5), (6, 6)],
    });
    let err = Arena::new(cfg).err().unwrap();
    assert!(err.to_string().contains("spawn"), "{err}");

    let err =
        ArenaConfig::from_json(r#"{"allies": [], "enemies": [{"type": "ranger"}]}"#).unwrap_err();
    assert!(err.to_string().contains("allies"), "{err}");
}

#[test]
fn json_round_trip_preserves_the_config() {
    let mut cfg = ArenaConfig::with_teams(
        vec![UnitSpec::ranger(), UnitSpec::medic()],
        vec![UnitSpec::bruiser()],
    );
    cfg.max_steps = 25;
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(ArenaConfig::from_json(&text).unwrap(), cfg);
    let short = ArenaConfig::from_json(r#"{"allies": ["ranger"], "enemies": ["bruiser"]}"#);
    let short = short.unwrap();
    assert_eq!(short.allies[0], UnitSpec::ranger());
    assert_eq!(short.enemies[0].unit_type, UnitType::Bruiser);
}

#[test]
fn fixed_spawn_ignores_the_seed_and_zone_spawn_is_reproducible() {
    let mut a = Arena::new(fixed(vec![(1, 1), (2, 1)], vec![(20, 20)])).unwrap();
    assert_eq!(a.reset(1).unwrap().state, a.reset(999).unwrap().state);

    let mut b = Arena::new(ArenaConfig::rangers(3, 3)).unwrap();
    let s1 = b.reset(42).unwrap();
    let s2 = b.reset(42).unwrap();
    assert_eq!(s1, s2);
    let differs = (0..20).any(|k| b.reset(k).unwrap().state != s1.state);
    assert!(differs);
}

fn mirrored(cfg: &ArenaConfig) -> ArenaConfig {
    let w = cfg.width as i32;
    let flip = |v: &Vec<(i32, i32)>| v.iter().map(|&(x, y)| (w - 1 - x, y)).collect();
    let Some(Spawn::Fixed { allies, enemies }) = &cfg.spawn else {
        unreachable!()
    };
    let mut m = cfg.clone();
    m.spawn = Some(Spawn::Fixed {
        allies: flip(allies),
        enemies: flip(enemies),
    });
    m
}

fn mirror_action(a: usize) -> usize {
    match a {
        ACTION_EAST => ACTION_WEST,
        ACTION_WEST => ACTION_EAST,
        other => other,
    }
}

#[test]
fn mirrored_spawns_and_actions_give_a_mirrored_trajectory() {
    let cfg = fixed(
        vec![(9, 14), (10, 16), (9, 17)],
        vec![(20, 15), (21, 13), (20, 18)],
    );
    let mut a = Arena::new(cfg.clone()).unwrap();
    let mut b = Arena::new(mirrored(&cfg)).unwrap();
    let w = cfg.width as i32;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for ep in 0..10 {
        let mut snap = a.reset(ep).unwrap();
        b.reset(ep).unwrap();
        loop {
            let acts = script::random_actions(&snap.masks, &mut rng);
            let flipped: Vec<usize> = acts.iter().map(|&x| mirror_action(x)).collect();
            let (oa, next) = a.step(&acts).unwrap();
            let (ob, _) = b.step(&flipped).unwrap();
            snap = next;
            assert_eq!(oa, ob);
            for (ua, ub) in a.units().iter().zip(b.units()) {
                assert_eq!((ua.x, ua.y), (w - 1 - ub.x, ub.y));
                assert_eq!(
                    (ua.health, ua.shield, ua.alive),
                    (ub.health, ub.shield, ub.alive)
                );
            }
            if oa.terminated {
                break;
            }
        }
    }
}

#[test]
fn enemies_start_dead_fixture_wins_on_the_first_step() {
    let mut cfg = ArenaConfig::rangers(3, 3);
    cfg.enemies_start_dead = true;
    let mut arena = Arena::new(cfg).unwrap();
    arena.reset(0).unwrap();
    let (out, _) = arena.step(&[ACTION_STOP; 3]).unwrap();
    assert!(out.terminated && out.won);
}

#[derive(Clone, Default)]
struct Shared(Arc<Mutex<Vec<u8>>>);

impl Write for Shared {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[test]
fn trace_writes_one_json_line_per_reset_and_step() {
    let buf = Shared::default();
    let mut cfg = fixed(vec![(0, 0)], vec![(31, 31)]);
    cfg.max_steps = 4;
    let mut arena = Arena::new(cfg).unwrap();
    arena.set_trace(Some(TraceWriter::new(Box::new(buf.clone()))));
    arena.reset(9).unwrap();
    for _ in 0..4 {
        arena.step(&[ACTION_STOP]).unwrap();
    }
    let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0]["seed"], 9);
    assert_eq!(lines[4]["step"], 4);
    assert_eq!(lines[4]["terminated"], true);
    assert_eq!(lines[1]["units"].as_array().unwrap().len(), 2);
}
