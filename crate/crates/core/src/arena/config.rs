use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_TEAM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitType {
    Ranger,
    Bruiser,
    Medic,
}

impl UnitType {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            UnitType::Ranger => [1.0, 0.0, 0.0],
            UnitType::Bruiser => [0.0, 1.0, 0.0],
            UnitType::Medic => [0.0, 0.0, 1.0],
        }
    }

    pub fn heals(self) -> bool {
        matches!(self, UnitType::Medic)
    }
}

/// Stats of one unit. In JSON a unit is either a bare type name
/// (`"ranger"`) or an object with `type` plus any stat overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UnitRepr")]
pub struct UnitSpec {
    #[serde(rename = "type")]
    pub unit_type: UnitType,
    pub max_health: f64,
    /// Zero for types without a shield; the feature slot is always present.
    pub max_shield: f64,
    /// Euclidean reach of attacks (or heals), in cells.
    pub attack_range: f64,
    pub damage_or_heal: f64,
    pub sight_range: f64,
}

impl UnitSpec {
    pub fn ranger() -> Self {
        UnitSpec {
            unit_type: UnitType::Ranger,
            max_health: 40.0,
            max_shield: 0.0,
            attack_range: 5.0,
            damage_or_heal: 20.0,
            sight_range: 8.0,
        }
    }

    pub fn bruiser() -> Self {
        UnitSpec {
            unit_type: UnitType::Bruiser,
            max_health: 50.0,
            max_shield: 30.0,
            attack_range: 2.0,
            damage_or_heal: 8.0,
            sight_range: 8.0,
        }
    }

    pub fn medic() -> Self {
        UnitSpec {
            unit_type: UnitType::Medic,
            max_health: 50.0,
            max_shield: 0.0,
            attack_range: 4.0,
            damage_or_heal: 5.0,
            sight_range: 8.0,
        }
    }

    pub fn of_type(t: UnitType) -> Self {
        match t {
            UnitType::Ranger => Self::ranger(),
            UnitType::Bruiser => Self::bruiser(),
            UnitType::Medic => Self::medic(),
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let ok = |cond: bool, reason: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::config(field, reason))
            }
        };
        ok(
            self.max_health > 0.0 && self.max_health.is_finite(),
            "max_health must be positive",
        )?;
        ok(
            self.max_shield >= 0.0 && self.max_shield.is_finite(),
            "max_shield must be >= 0",
        )?;
        ok(self.attack_range > 0.0, "attack_range must be positive")?;
        ok(
            self.sight_range >= self.attack_range,
            "sight_range must be >= attack_range",
        )?;
        ok(
            self.damage_or_heal >= 0.0 && self.damage_or_heal.is_finite(),
            "damage_or_heal must be >= 0",
        )
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum UnitRepr {
    Name(UnitType),
    Full {
        #[serde(rename = "type")]
        unit_type: UnitType,
        max_health: Option<f64>,
        max_shield: Option<f64>,
        attack_range: Option<f64>,
        damage_or_heal: Option<f64>,
        sight_range: Option<f64>,
    },
}

impl TryFrom<UnitRepr> for UnitSpec {
    type Error = String;

    fn try_from(r: UnitRepr) -> std::result::Result<Self, String> {
        Ok(match r {
            UnitRepr::Name(t) => UnitSpec::of_type(t),
            UnitRepr::Full {
                unit_type,
                max_health,
                max_shield,
                attack_range,
                damage_or_heal,
                sight_range,
            } => {
                let d = UnitSpec::of_type(unit_type);
                UnitSpec {
                    unit_type,
                    max_health: max_health.unwrap_or(d.max_health),
                    max_shield: max_shield.unwrap_or(d.max_shield),
                    attack_range: attack_range.unwrap_or(d.attack_range),
                    damage_or_heal: damage_or_heal.unwrap_or(d.damage_or_heal),
                    sight_range: sight_range.unwrap_or(d.sight_range),
                }
            }
        })
    }
}

/// Inclusive rectangle of grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Zone {
    pub fn cells(&self) -> usize {
        ((self.x1 - self.x0 + 1).max(0) * (self.y1 - self.y0 + 1).max(0)) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Spawn {
    /// Explicit coordinates, one per unit in team order.
    Fixed {
        allies: Vec<(i32, i32)>,
        enemies: Vec<(i32, i32)>,
    },
    /// Distinct cells drawn uniformly from each team's zone, seeded by reset.
    Zones { allies: Zone, enemies: Zone },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpponentScript {
    #[default]
    AttackNearest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub damage_weight: f64,
    pub kill_bonus: f64,
    pub win_bonus: f64,
    /// Divide every reward by the maximum attainable episode return.
    pub normalize: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            damage_weight: 1.0,
            kill_bonus: 10.0,
            win_bonus: 200.0,
            normalize: true,
        }
    }
}

/// Full scenario description. Every field except the two team lists has a
/// default; see the README for the JSON schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArenaConfig {
    #[serde(default = "default_extent")]
    pub width: usize,
    #[serde(default = "default_extent")]
    pub height: usize,
    pub allies: Vec<UnitSpec>,
    pub enemies: Vec<UnitSpec>,
    #[serde(default)]
    pub spawn: Option<Spawn>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub opponent_script: OpponentScript,
    #[serde(default)]
    pub reward: RewardConfig,
    /// Test fixture: every enemy begins the episode already dead.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub enemies_start_dead: bool,
}

fn default_extent() -> usize {
    32
}

fn default_max_steps() -> usize {
    60
}

impl ArenaConfig {
    /// Teams facing each other across the middle of the grid, drawn from
    /// zones `zone_w` cells wide. Used when `spawn` is omitted.
    pub fn with_teams(allies: Vec<UnitSpec>, enemies: Vec<UnitSpec>) -> Self {
        ArenaConfig {
            width: default_extent(),
            height: default_extent(),
            allies,
            enemies,
            spawn: None,
            max_steps: default_max_steps(),
            opponent_script: OpponentScript::AttackNearest,
            reward: RewardConfig::default(),
            enemies_start_dead: false,
        }
    }

    /// `n` rangers against `m` rangers.
    pub fn rangers(n: usize, m: usize) -> Self {
        Self::with_teams(vec![UnitSpec::ranger(); n], vec![UnitSpec::ranger(); m])
    }

    /// The spawn rule in effect: the configured one or default zones.
    pub fn spawn_rule(&self) -> Spawn {
        if let Some(s) = &self.spawn {
            return s.clone();
        }
        let (w, h) = (self.width as i32, self.height as i32);
        let team = self.allies.len().max(self.enemies.len()) as i32;
        // Two columns per team plus slack, centred vertically.
        let rows = (team + 1).max(4).min(h);
        let y0 = (h - rows) / 2;
        let cx = w / 2;
        Spawn::Zones {
            allies: Zone {
                x0: (cx - 6).max(0),
                y0,
                x1: (cx - 5).max(0),
                y1: y0 + rows - 1,
            },
            enemies: Zone {
                x0: (cx + 4).min(w - 1),
                y0,
                x1: (cx + 5).min(w - 1),
                y1: y0 + rows - 1,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ArenaConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::config("width/height", "grid must be at least 2x2"));
        }
        for (field, team) in [("allies", &self.allies), ("enemies", &self.enemies)] {
            if team.is_empty() || team.len() > MAX_TEAM {
                return Err(Error::config(
                    field,
                    format!("team size must be in 1..={MAX_TEAM}"),
                ));
            }
            for (i, u) in team.iter().enumerate() {
                u.validate(&format!("{field}[{i}]"))?;
            }
        }
        if self.max_steps < 1 {
            return Err(Error::config("max_steps", "must be >= 1"));
        }
        let in_grid = |x: i32, y: i32| {
            x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
        };
        match self.spawn_rule() {
            Spawn::Fixed { allies, enemies } => {
                if allies.len() != self.allies.len() {
                    return Err(Error::config(
                        "spawn.allies",
                        "one coordinate per ally required",
                    ));
                }
                if enemies.len() != self.enemies.len() {
                    return Err(Error::config(
                        "spawn.enemies",
                        "one coordinate per enemy required",
                    ));
                }
                let mut seen = std::collections::HashSet::new();
                for &(x, y) in allies.iter().chain(&enemies) {
                    if !in_grid(x, y) {
                        return Err(Error::config(
                            "spawn",
                            format!("({x}, {y}) is outside the grid"),
                        ));
                    }
                    if !seen.insert((x, y)) {
                        return Err(Error::config("spawn", format!("({x}, {y}) used twice")));
                    }
                }
            }
            Spawn::Zones { allies, enemies } => {
                for (field, z, n) in [
                    ("spawn.allies", allies, self.allies.len()),
                    ("spawn.enemies", enemies, self.enemies.len()),
                ] {
                    if !in_grid(z.x0, z.y0) || !in_grid(z.x1, z.y1) || z.x0 > z.x1 || z.y0 > z.y1 {
                        return Err(Error::config(
                            field,
                            "zone must be a non-empty rectangle inside the grid",
                        ));
                    }
                    if z.cells() < n {
                        return Err(Error::config(field, "zone has fewer cells than units"));
                    }
                }
                let overlap = allies.x0 <= enemies.x1
                    && enemies.x0 <= allies.x1
                    && allies.y0 <= enemies.y1
                    && enemies.y0 <= allies.y1;
                if overlap
                    && allies.cells() + enemies.cells() < self.allies.len() + self.enemies.len()
                {
                    return Err(Error::config(
                        "spawn",
                        "overlapping zones too small for both teams",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        super::N_BASIC_ACTIONS + self.enemies.len()
    }

    /// Width of the global state vector.
    pub fn state_dim(&self) -> usize {
        (self.allies.len() + self.enemies.len()) * super::STATE_UNIT_DIM
    }

    /// Sum of enemy health and shields plus all bonuses: the largest
    /// possible undiscounted return before normalisation.
    pub fn max_return(&self) -> f64 {
        let hp: f64 = self
            .enemies
            .iter()
            .map(|u| u.max_health + u.max_shield)
            .sum();
        self.reward.damage_weight * hp
            + self.reward.kill_bonus * self.enemies.len() as f64
            + self.reward.win_bonus
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_json_accepts_name_or_overrides() {
        let cfg: ArenaConfig = serde_json::from_str(
            r#"{"allies": ["ranger", {"type": "bruiser", "max_health": 99}], "enemies": ["medic"]}"#,
        )
        .unwrap();
        assert_eq!(cfg.allies[0], UnitSpec::ranger());
        assert_eq!(cfg.allies[1].max_health, 99.0);
        assert_eq!(cfg.allies[1].max_shield, UnitSpec::bruiser().max_shield);
        assert_eq!(cfg.width, 32);
        assert_eq!(cfg.max_steps, 60);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = ArenaConfig::rangers(3, 3);
        cfg.max_steps = 0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("max_steps"));

        let cfg = ArenaConfig::rangers(17, 3);
        assert!(cfg.validate().unwrap_err().to_string().contains("allies"));

        let mut cfg = ArenaConfig::rangers(1, 1);
        cfg.allies[0].sight_range = 1.0;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("allies[0]"));

        let mut cfg = ArenaConfig::rangers(2, 1);
        cfg.spawn = Some(Spawn::Fixed {
            allies: vec![(0, 0), (0, 0)],
            enemies: vec![(5, 5)],
        });
        assert!(cfg.validate().unwrap_err().to_string().contains("spawn"));
    }

    #[test]
    fn json_round_trip() {
        let cfg = ArenaConfig::rangers(3, 4);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ArenaConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_rejected() {
        let err =
            ArenaConfig::from_json(r#"{"allies": ["ranger"], "enemies": ["ranger"], "colour": 1}"#);
        assert!(err.is_err());
    }
}
