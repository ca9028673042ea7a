//! Grid combat micro-arena: a cooperative Dec-POMDP with partial
//! observability, discrete actions, a shaped shared reward and a scripted
//! opponent.

mod config;
mod env;
pub mod script;
mod trace;

pub use config::{
    ArenaConfig, OpponentScript, RewardConfig, Spawn, UnitSpec, UnitType, Zone, MAX_TEAM,
};
pub use env::{visible, Arena, Side, Snapshot, StepOutcome, Unit};
pub use trace::TraceWriter;

/// `[health, shield, type one-hot(3)]`.
pub const OWN_DIM: usize = 5;
/// `[is_ally, distance, rel_x, rel_y, health, shield, type one-hot(3)]`.
pub const VAR_DIM: usize = 9;
/// `[can_move N, S, E, W, x, y]`.
pub const INV_DIM: usize = 6;
/// `[health, shield, type one-hot(3), x, y]` per unit.
pub const STATE_UNIT_DIM: usize = 7;

/// No-op, stop and four moves precede the per-target actions.
pub const N_BASIC_ACTIONS: usize = 6;
pub const ACTION_NOOP: usize = 0;
pub const ACTION_STOP: usize = 1;
pub const ACTION_NORTH: usize = 2;
pub const ACTION_SOUTH: usize = 3;
pub const ACTION_EAST: usize = 4;
pub const ACTION_WEST: usize = 5;

/// Grid offset of the four move actions, in `N, S, E, W` order.
pub const MOVES: [(i32, i32); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

/// Which entity a population-variant feature row describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntityRef {
    Ally(usize),
    Enemy(usize),
}

/// One agent's local observation, split into its own features, one row per
/// visible entity, and the features whose width never changes.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationTriple {
    pub own: [f64; OWN_DIM],
    pub variant: Vec<[f64; VAR_DIM]>,
    pub invariant: [f64; INV_DIM],
    /// Entity behind each row of `variant`.
    pub entities: Vec<EntityRef>,
    /// For each target action slot, the `variant` row of the entity it acts
    /// on, when that entity is visible.
    pub target_slots: Vec<Option<usize>>,
}

impl ObservationTriple {
    /// Applies a permutation to the variant rows, keeping `entities` and
    /// `target_slots` consistent. `perm[new] = old`.
    pub fn permute_rows(&self, perm: &[usize]) -> ObservationTriple {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        ObservationTriple {
            own: self.own,
            variant: perm.iter().map(|&o| self.variant[o]).collect(),
            invariant: self.invariant,
            entities: perm.iter().map(|&o| self.entities[o]).collect(),
            target_slots: self
                .target_slots
                .iter()
                .map(|s| s.map(|o| inverse[o]))
                .collect(),
        }
    }

    pub fn n_actions(&self) -> usize {
        N_BASIC_ACTIONS + self.target_slots.len()
    }
}
