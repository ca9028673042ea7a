use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ArenaConfig, Spawn};
use super::script::{self, Intent};
use super::trace::TraceWriter;
use super::{
    EntityRef, ObservationTriple, ACTION_NOOP, ACTION_STOP, INV_DIM, MOVES, N_BASIC_ACTIONS,
    OWN_DIM, STATE_UNIT_DIM, VAR_DIM,
};
use crate::arena::UnitSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Ally,
    Enemy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub spec: UnitSpec,
    pub side: Side,
    pub x: i32,
    pub y: i32,
    pub health: f64,
    pub shield: f64,
    pub alive: bool,
}

impl Unit {
    pub fn distance(&self, other: &Unit) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        (dx * dx + dy * dy).sqrt()
    }

    fn health_frac(&self) -> f64 {
        self.health / self.spec.max_health
    }

    fn shield_frac(&self) -> f64 {
        if self.spec.max_shield > 0.0 {
            self.shield / self.spec.max_shield
        } else {
            0.0
        }
    }

    /// Removes `amount` from shield first, then health. Returns the amount
    /// actually removed.
    fn take_damage(&mut self, amount: f64) -> f64 {
        let from_shield = amount.min(self.shield);
        self.shield -= from_shield;
        let from_health = (amount - from_shield).min(self.health);
        self.health -= from_health;
        from_shield + from_health
    }
}

/// `observer` sees `target` iff both are alive and the target lies within the
/// closed sight disc of the observer.
pub fn visible(observer: &Unit, target: &Unit) -> bool {
    observer.alive && target.alive && observer.distance(target) <= observer.spec.sight_range
}

/// Everything the learner and the agents receive after a reset or a step.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub state: Vec<f64>,
    pub observations: Vec<ObservationTriple>,
    /// One availability mask per agent, `n_actions` wide.
    pub masks: Vec<Vec<bool>>,
    /// Row-major `n x n` ally-to-ally visibility (`[i * n + j]`: i sees j).
    pub visibility: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminated: bool,
    pub won: bool,
    /// Terminated only because the step limit was reached.
    pub truncated: bool,
    /// Shield plus health removed from enemies this step.
    pub damage: f64,
    pub kills: usize,
}

pub struct Arena {
    config: ArenaConfig,
    units: Vec<Unit>,
    n_allies: usize,
    steps: usize,
    done: bool,
    reward_scale: f64,
    trace: Option<TraceWriter>,
}

/// Clones the simulation state. The clone never writes a trace.
impl Clone for Arena {
    fn clone(&self) -> Self {
        Arena {
            config: self.config.clone(),
            units: self.units.clone(),
            n_allies: self.n_allies,
            steps: self.steps,
            done: self.done,
            reward_scale: self.reward_scale,
            trace: None,
        }
    }
}

impl Arena {
    pub fn new(config: ArenaConfig) -> Result<Self> {
        config.validate()?;
        let n_allies = config.allies.len();
        let reward_scale = if config.reward.normalize {
            1.0 / config.max_return()
        } else {
            1.0
        };
        let mut arena = Arena {
            units: Vec::new(),
            n_allies,
            steps: 0,
            done: true,
            reward_scale,
            trace: None,
            config,
        };
        arena.place(0);
        Ok(arena)
    }

    pub fn config(&self) -> &ArenaConfig {
        &self.config
    }

    pub fn n_agents(&self) -> usize {
        self.n_allies
    }

    pub fn n_enemies(&self) -> usize {
        self.units.len() - self.n_allies
    }

    pub fn n_actions(&self) -> usize {
        N_BASIC_ACTIONS + self.n_enemies()
    }

    pub fn state_dim(&self) -> usize {
        self.units.len() * STATE_UNIT_DIM
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn ally(&self, i: usize) -> &Unit {
        &self.units[i]
    }

    pub fn enemy(&self, k: usize) -> &Unit {
        &self.units[self.n_allies + k]
    }

    /// Emit one JSON line per step (and one for the reset) to `trace`.
    pub fn set_trace(&mut self, trace: Option<TraceWriter>) {
        self.trace = trace;
    }

    /// Visibility between ally `i` and any entity.
    pub fn visibility(&self, i: usize, j: EntityRef) -> bool {
        visible(&self.units[i], self.entity(j))
    }

    fn entity(&self, e: EntityRef) -> &Unit {
        match e {
            EntityRef::Ally(j) => &self.units[j],
            EntityRef::Enemy(k) => &self.units[self.n_allies + k],
        }
    }

    fn place(&mut self, seed: u64) {
        let cfg = &self.config;
        let positions = match cfg.spawn_rule() {
            Spawn::Fixed { allies, enemies } => {
                allies.into_iter().chain(enemies).collect::<Vec<_>>()
            }
            Spawn::Zones { allies, enemies } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut taken = Vec::new();
                for (zone, n) in [(allies, cfg.allies.len()), (enemies, cfg.enemies.len())] {
                    let cells: Vec<(i32, i32)> = (zone.y0..=zone.y1)
                        .flat_map(|y| (zone.x0..=zone.x1).map(move |x| (x, y)))
                        .filter(|c| !taken.contains(c))
                        .collect();
                    let picks = sample(&mut rng, cells.len(), n);
                    taken.extend(picks.iter().map(|i| cells[i]));
                }
                taken
            }
        };
        let specs = cfg
            .allies
            .iter()
            .map(|s| (s, Side::Ally))
            .chain(cfg.enemies.iter().map(|s| (s, Side::Enemy)));
        self.units = specs
            .zip(positions)
            .map(|((spec, side), (x, y))| {
                let dead = side == Side::Enemy && cfg.enemies_start_dead;
                Unit {
                    spec: spec.clone(),
                    side,
                    x,
                    y,
                    health: if dead { 0.0 } else { spec.max_health },
                    shield: if dead { 0.0 } else { spec.max_shield },
                    alive: !dead,
                }
            })
            .collect();
    }

    /// Starts a new episode. Deterministic for a given config and seed.
    pub fn reset(&mut self, seed: u64) -> Result<Snapshot> {
        self.place(seed);
        self.steps = 0;
        self.done = false;
        if let Some(t) = self.trace.as_mut() {
            t.write_reset(seed, &self.units)?;
        }
        Ok(self.snapshot())
    }

    pub fn snapshot(&self) -> Snapshot {
        let n = self.n_allies;
        let mut visibility = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                visibility[i * n + j] = i != j && visible(&self.units[i], &self.units[j]);
            }
        }
        Snapshot {
            state: self.global_state(),
            observations: (0..n).map(|i| self.observe(i)).collect(),
            masks: (0..n).map(|i| self.avail_actions(i)).collect(),
            visibility,
        }
    }

    pub fn global_state(&self) -> Vec<f64> {
        let (w, h) = self.extent_norm();
        let mut s = Vec::with_capacity(self.state_dim());
        for u in &self.units {
            if u.alive {
                s.push(u.health_frac());
                s.push(u.shield_frac());
                s.extend_from_slice(&u.spec.unit_type.one_hot());
                s.push(u.x as f64 / w);
                s.push(u.y as f64 / h);
            } else {
                s.extend_from_slice(&[0.0; STATE_UNIT_DIM]);
            }
        }
        s
    }

    fn extent_norm(&self) -> (f64, f64) {
        (
            (self.config.width - 1) as f64,
            (self.config.height - 1) as f64,
        )
    }

    fn free_cell(&self, x: i32, y: i32) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.config.width
            && (y as usize) < self.config.height
            && !self.units.iter().any(|u| u.alive && u.x == x && u.y == y)
    }

    pub fn observe(&self, i: usize) -> ObservationTriple {
        let n_enemies = self.n_enemies();
        let me = &self.units[i];
        if !me.alive {
            return ObservationTriple {
                own: [0.0; OWN_DIM],
                variant: Vec::new(),
                invariant: [0.0; INV_DIM],
                entities: Vec::new(),
                target_slots: vec![None; n_enemies],
            };
        }
        let mut own = [0.0; OWN_DIM];
        own[0] = me.health_frac();
        own[1] = me.shield_frac();
        own[2..5].copy_from_slice(&me.spec.unit_type.one_hot());

        let sight = me.spec.sight_range;
        let mut variant = Vec::new();
        let mut entities = Vec::new();
        let candidates = (0..self.n_allies)
            .filter(|&j| j != i)
            .map(EntityRef::Ally)
            .chain((0..n_enemies).map(EntityRef::Enemy));
        for e in candidates {
            let other = self.entity(e);
            if !visible(me, other) {
                continue;
            }
            let mut row = [0.0; VAR_DIM];
            row[0] = matches!(e, EntityRef::Ally(_)) as u8 as f64;
            row[1] = me.distance(other) / sight;
            row[2] = (other.x - me.x) as f64 / sight;
            row[3] = (other.y - me.y) as f64 / sight;
            row[4] = other.health_frac();
            row[5] = other.shield_frac();
            row[6..9].copy_from_slice(&other.spec.unit_type.one_hot());
            variant.push(row);
            entities.push(e);
        }

        let mut invariant = [0.0; INV_DIM];
        for (d, (dx, dy)) in MOVES.iter().enumerate() {
            invariant[d] = self.free_cell(me.x + dx, me.y + dy) as u8 as f64;
        }
        let (w, h) = self.extent_norm();
        invariant[4] = me.x as f64 / w;
        invariant[5] = me.y as f64 / h;

        let heals = me.spec.unit_type.heals();
        let target_slots = (0..n_enemies)
            .map(|k| {
                let want = if heals {
                    EntityRef::Ally(k)
                } else {
                    EntityRef::Enemy(k)
                };
                entities.iter().position(|e| *e == want)
            })
            .collect();

        ObservationTriple {
            own,
            variant,
            invariant,
            entities,
            target_slots,
        }
    }

    /// Whether ally `i` may use target slot `k` right now.
    fn can_target(&self, i: usize, k: usize) -> bool {
        let me = &self.units[i];
        if me.spec.unit_type.heals() {
            if k >= self.n_allies || k == i {
                return false;
            }
            let other = &self.units[k];
            other.alive && me.distance(other) <= me.spec.attack_range
        } else {
            let other = &self.units[self.n_allies + k];
            other.alive && me.distance(other) <= me.spec.attack_range
        }
    }

    pub fn avail_actions(&self, i: usize) -> Vec<bool> {
        let mut mask = vec![false; self.n_actions()];
        if !self.units[i].alive {
            mask[ACTION_NOOP] = true;
            return mask;
        }
        mask[ACTION_STOP..N_BASIC_ACTIONS]
            .iter_mut()
            .for_each(|m| *m = true);
        for k in 0..self.n_enemies() {
            mask[N_BASIC_ACTIONS + k] = self.can_target(i, k);
        }
        mask
    }

    fn try_move(&mut self, u: usize, dir: usize) {
        let (dx, dy) = MOVES[dir];
        let (x, y) = (self.units[u].x + dx, self.units[u].y + dy);
        if self.free_cell(x, y) {
            self.units[u].x = x;
            self.units[u].y = y;
        }
    }

    /// Advances one step: ally moves, ally attacks and heals, the scripted
    /// opponent, then deaths.
    pub fn step(&mut self, actions: &[usize]) -> Result<(StepOutcome, Snapshot)> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        if actions.len() != self.n_allies {
            return Err(Error::Contract(format!(
                "expected {} actions, got {}",
                self.n_allies,
                actions.len()
            )));
        }
        for (i, &a) in actions.iter().enumerate() {
            if a >= self.n_actions() || !self.avail_actions(i)[a] {
                return Err(Error::UnavailableAction {
                    agent: i,
                    action: a,
                });
            }
        }

        for (i, &a) in actions.iter().enumerate() {
            if (2..N_BASIC_ACTIONS).contains(&a) {
                self.try_move(i, a - 2);
            }
        }

        let mut damage = 0.0;
        for (i, &a) in actions.iter().enumerate() {
            if a < N_BASIC_ACTIONS {
                continue;
            }
            let k = a - N_BASIC_ACTIONS;
            let amount = self.units[i].spec.damage_or_heal;
            if self.units[i].spec.unit_type.heals() {
                heal(&mut self.units[k], amount);
            } else {
                damage += self.units[self.n_allies + k].take_damage(amount);
            }
        }

        let intents = script::enemy_intents(&self.units, self.n_allies);
        for (offset, intent) in intents.into_iter().enumerate() {
            let e = self.n_allies + offset;
            match intent {
                Intent::Stop => {}
                Intent::Move(dir) => self.try_move(e, dir),
                Intent::Attack(t) => {
                    let amount = self.units[e].spec.damage_or_heal;
                    self.units[t].take_damage(amount);
                }
                Intent::Heal(t) => {
                    let amount = self.units[e].spec.damage_or_heal;
                    heal(&mut self.units[t], amount);
                }
            }
        }

        let mut kills = 0;
        for (idx, u) in self.units.iter_mut().enumerate() {
            if u.alive && u.health <= 0.0 {
                u.alive = false;
                u.health = 0.0;
                u.shield = 0.0;
                if idx >= self.n_allies {
                    kills += 1;
                }
            }
        }

        self.steps += 1;
        let allies_alive = self.units[..self.n_allies].iter().any(|u| u.alive);
        let enemies_alive = self.units[self.n_allies..].iter().any(|u| u.alive);
        let won = !enemies_alive;
        let wiped = !allies_alive || !enemies_alive;
        let truncated = !wiped && self.steps >= self.config.max_steps;
        let terminated = wiped || truncated;
        self.done = terminated;

        let r = &self.config.reward;
        let raw = r.damage_weight * damage
            + r.kill_bonus * kills as f64
            + if won { r.win_bonus } else { 0.0 };
        let outcome = StepOutcome {
            reward: raw * self.reward_scale,
            terminated,
            won,
            truncated,
            damage,
            kills,
        };
        if let Some(t) = self.trace.as_mut() {
            t.write_step(self.steps, actions, &outcome, &self.units)?;
        }
        Ok((outcome, self.snapshot()))
    }
}

fn heal(target: &mut Unit, amount: f64) {
    if target.alive && target.health > 0.0 {
        target.health = (target.health + amount).min(target.spec.max_health);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::{ACTION_EAST, ACTION_WEST};

    fn fixed(allies: Vec<(i32, i32)>, enemies: Vec<(i32, i32)>) -> ArenaConfig {
        let mut cfg = ArenaConfig::rangers(allies.len(), enemies.len());
        cfg.spawn = Some(Spawn::Fixed { allies, enemies });
        cfg
    }

    #[test]
    fn fixed_spawn_reset_is_seed_independent() {
        let mut a = Arena::new(fixed(vec![(1, 1), (2, 1)], vec![(20, 20)])).unwrap();
        let s1 = a.reset(1).unwrap();
        let s2 = a.reset(999).unwrap();
        assert_eq!(s1.state, s2.state);
    }

    #[test]
    fn random_spawn_reset_is_seeded() {
        let mut a = Arena::new(ArenaConfig::rangers(3, 3)).unwrap();
        let s1 = a.reset(5).unwrap();
        let s2 = a.reset(5).unwrap();
        let s3 = a.reset(6).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1.state, s3.state);
    }

    #[test]
    fn lone_agent_sees_nothing() {
        let mut a = Arena::new(fixed(vec![(0, 0)], vec![(30, 30)])).unwrap();
        let s = a.reset(0).unwrap();
        assert!(s.observations[0].variant.is_empty());
        assert_eq!(s.observations[0].target_slots, vec![None]);
    }

    #[test]
    fn visibility_boundary_and_death() {
        let mut a = Arena::new(fixed(vec![(0, 0), (8, 0), (0, 1)], vec![(30, 30)])).unwrap();
        a.reset(0).unwrap();
        // Distance exactly the sight range (8) counts as visible.
        assert!(a.visibility(0, EntityRef::Ally(1)));
        assert!(a.visibility(0, EntityRef::Ally(2)));
        a.units[1].alive = false;
        assert!(!a.visibility(0, EntityRef::Ally(1)));
        // Same cell is distance zero.
        let u = a.units[0].clone();
        assert!(visible(&u, &u));
    }

    #[test]
    fn idle_out_of_range_gives_zero_reward() {
        let mut a = Arena::new(fixed(vec![(0, 0)], vec![(31, 31)])).unwrap();
        a.reset(0).unwrap();
        let (out, _) = a.step(&[ACTION_STOP]).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(!out.terminated);
    }

    #[test]
    fn killing_last_enemy_pays_damage_kill_and_win() {
        let mut cfg = fixed(vec![(5, 5)], vec![(8, 5)]);
        cfg.enemies[0].max_health = 4.0;
        cfg.reward.normalize = false;
        let mut a = Arena::new(cfg).unwrap();
        a.reset(0).unwrap();
        let (out, _) = a.step(&[N_BASIC_ACTIONS]).unwrap();
        // d = 4 (health removed, capped), w_dmg = 1, +10 kill, +200 win.
        assert_eq!(out.reward, 4.0 + 10.0 + 200.0);
        assert!(out.terminated && out.won && !out.truncated);
    }

    #[test]
    fn normalised_reward_divides_by_max_return() {
        let mut cfg = fixed(vec![(5, 5)], vec![(8, 5)]);
        cfg.enemies[0].max_health = 4.0;
        let mut a = Arena::new(cfg).unwrap();
        a.reset(0).unwrap();
        let (out, _) = a.step(&[N_BASIC_ACTIONS]).unwrap();
        assert!((out.reward - 1.0).abs() < 1e-15);
    }

    #[test]
    fn step_limit_truncates() {
        let mut cfg = fixed(vec![(0, 0)], vec![(31, 31)]);
        cfg.max_steps = 2;
        let mut a = Arena::new(cfg).unwrap();
        a.reset(0).unwrap();
        let (o1, _) = a.step(&[ACTION_STOP]).unwrap();
        assert!(!o1.terminated);
        let (o2, _) = a.step(&[ACTION_STOP]).unwrap();
        assert!(o2.terminated && !o2.won && o2.truncated);
        assert!(a.step(&[ACTION_STOP]).is_err());
    }

    #[test]
    fn unavailable_action_is_rejected_with_agent_and_action() {
        let mut a = Arena::new(fixed(vec![(0, 0)], vec![(31, 31)])).unwrap();
        a.reset(0).unwrap();
        let err = a.step(&[N_BASIC_ACTIONS]).unwrap_err();
        assert!(matches!(
            err,
            Error::UnavailableAction {
                agent: 0,
                action: 6
            }
        ));
        let err = a.step(&[ACTION_NOOP]).unwrap_err();
        assert!(matches!(
            err,
            Error::UnavailableAction {
                agent: 0,
                action: 0
            }
        ));
    }

    #[test]
    fn dead_agent_has_only_noop() {
        let mut cfg = fixed(vec![(5, 5), (0, 31)], vec![(6, 5)]);
        cfg.allies[0].max_health = 1.0;
        let mut a = Arena::new(cfg).unwrap();
        a.reset(0).unwrap();
        let (_, snap) = a.step(&[ACTION_STOP, ACTION_STOP]).unwrap();
        assert!(!a.ally(0).alive);
        assert_eq!(snap.masks[0].iter().filter(|m| **m).count(), 1);
        assert!(snap.masks[0][ACTION_NOOP]);
        assert_eq!(snap.observations[0].own, [0.0; OWN_DIM]);
    }

    #[test]
    fn shield_absorbs_before_health() {
        let mut cfg = fixed(vec![(5, 5)], vec![(7, 5)]);
        cfg.enemies[0] = UnitSpec::bruiser();
        cfg.enemies[0].damage_or_heal = 0.0;
        let mut a = Arena::new(cfg).unwrap();
        a.reset(0).unwrap();
        a.step(&[N_BASIC_ACTIONS]).unwrap();
        let e = a.enemy(0);
        assert_eq!(e.shield, 30.0 - UnitSpec::ranger().damage_or_heal);
        assert_eq!(e.health, 50.0);
    }

    #[test]
    fn collisions_turn_moves_into_stops() {
        let mut a = Arena::new(fixed(vec![(0, 0), (1, 0)], vec![(31, 31)])).unwrap();
        a.reset(0).unwrap();
        a.step(&[ACTION_EAST, ACTION_STOP]).unwrap();
        assert_eq!((a.ally(0).x, a.ally(0).y), (0, 0));
        a.step(&[ACTION_WEST, ACTION_STOP]).unwrap();
        assert_eq!((a.ally(0).x, a.ally(0).y), (0, 0));
    }

    #[test]
    fn medic_slots_target_allies() {
        let mut cfg = fixed(vec![(5, 5), (6, 5)], vec![(20, 20)]);
        cfg.allies[1] = UnitSpec::medic();
        let mut a = Arena::new(cfg).unwrap();
        let snap = a.reset(0).unwrap();
        assert!(snap.masks[1][N_BASIC_ACTIONS]);
        assert_eq!(snap.observations[1].target_slots, vec![Some(0)]);
        a.units[0].health = 10.0;
        a.step(&[ACTION_STOP, N_BASIC_ACTIONS]).unwrap();
        assert_eq!(a.ally(0).health, 15.0);
    }

    #[test]
    fn enemies_start_dead_fixture_wins_immediately() {
        let mut cfg = ArenaConfig::rangers(2, 2);
        cfg.enemies_start_dead = true;
        let mut a = Arena::new(cfg).unwrap();
        a.reset(3).unwrap();
        let (out, _) = a.step(&[ACTION_STOP, ACTION_STOP]).unwrap();
        assert!(out.won && out.terminated);
    }
}
