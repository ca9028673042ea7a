//! Scripted attack-nearest behaviour, used for the opponent and as a
//! hand-written baseline for the controlled team.

use rand::Rng;

use super::env::{Arena, Side, Unit};
use super::{ACTION_STOP, MOVES, N_BASIC_ACTIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Intent {
    Stop,
    /// Index into [`MOVES`].
    Move(usize),
    Attack(usize),
    Heal(usize),
}

/// Nearest living unit among `candidates`; ties go to the lower index.
fn nearest(me: &Unit, units: &[Unit], candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in candidates {
        let u = &units[j];
        if !u.alive || u.health <= 0.0 {
            continue;
        }
        let d = me.distance(u);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}

/// The move that brings `me` closest to `target`, first of N, S, E, W on ties.
pub fn step_towards(me: &Unit, target: &Unit) -> usize {
    let mut best = 0;
    let mut best_d = i64::MAX;
    for (d, (dx, dy)) in MOVES.iter().enumerate() {
        let ex = (me.x + dx - target.x) as i64;
        let ey = (me.y + dy - target.y) as i64;
        let dist = ex * ex + ey * ey;
        if dist < best_d {
            best_d = dist;
            best = d;
        }
    }
    best
}

/// Attack-nearest for one unit. Combat units attack the nearest living foe
/// if it is within range, otherwise walk towards it. Healers heal the
/// nearest injured teammate in range, otherwise walk towards the nearest
/// teammate. With nobody to act on, the unit stops.
pub fn attack_nearest(me_idx: usize, units: &[Unit]) -> Intent {
    let me = &units[me_idx];
    if !me.alive {
        return Intent::Stop;
    }
    let friends = (0..units.len()).filter(|&j| j != me_idx && units[j].side == me.side);
    if me.spec.unit_type.heals() {
        let injured = friends
            .clone()
            .filter(|&j| units[j].health < units[j].spec.max_health)
            .filter(|&j| me.distance(&units[j]) <= me.spec.attack_range);
        if let Some(t) = nearest(me, units, injured) {
            return Intent::Heal(t);
        }
        return match nearest(me, units, friends) {
            Some(t) if me.distance(&units[t]) > me.spec.attack_range => {
                Intent::Move(step_towards(me, &units[t]))
            }
            _ => Intent::Stop,
        };
    }
    let foes = (0..units.len()).filter(|&j| units[j].side != me.side);
    match nearest(me, units, foes) {
        Some(t) if me.distance(&units[t]) <= me.spec.attack_range => Intent::Attack(t),
        Some(t) => Intent::Move(step_towards(me, &units[t])),
        None => Intent::Stop,
    }
}

/// Intents of every enemy, in enemy order.
pub fn enemy_intents(units: &[Unit], n_allies: usize) -> Vec<Intent> {
    (n_allies..units.len())
        .map(|e| attack_nearest(e, units))
        .collect()
}

/// Attack-nearest for the controlled team, expressed as action indices.
pub fn ally_attack_nearest(arena: &Arena) -> Vec<usize> {
    let units = arena.units();
    let n = arena.n_agents();
    (0..n)
        .map(|i| {
            let mask = arena.avail_actions(i);
            let action = match attack_nearest(i, units) {
                _ if !units[i].alive => 0,
                Intent::Stop => ACTION_STOP,
                Intent::Move(d) => 2 + d,
                Intent::Attack(t) => {
                    debug_assert_eq!(units[t].side, Side::Enemy);
                    N_BASIC_ACTIONS + (t - n)
                }
                Intent::Heal(t) => N_BASIC_ACTIONS + t,
            };
            if mask.get(action).copied().unwrap_or(false) {
                action
            } else {
                ACTION_STOP
            }
        })
        .collect()
}

/// One uniformly random available action per agent.
pub fn random_actions<R: Rng>(masks: &[Vec<bool>], rng: &mut R) -> Vec<usize> {
    masks
        .iter()
        .map(|m| {
            let avail: Vec<usize> = (0..m.len()).filter(|&a| m[a]).collect();
            avail[rng.gen_range(0..avail.len())]
        })
        .collect()
}
