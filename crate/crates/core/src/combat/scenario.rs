use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitType {
    Marine,
    Stalker,
    Zealot,
    Colossus,
}

impl UnitType {
    pub const ALL: [UnitType; 4] = [
        UnitType::Marine,
        UnitType::Stalker,
        UnitType::Zealot,
        UnitType::Colossus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    fn code(self) -> char {
        match self {
            UnitType::Marine => 'm',
            UnitType::Stalker => 's',
            UnitType::Zealot => 'z',
            UnitType::Colossus => 'c',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'm' => UnitType::Marine,
            's' => UnitType::Stalker,
            'z' => UnitType::Zealot,
            'c' => UnitType::Colossus,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitStats {
    pub max_hp: f64,
    pub max_shield: f64,
    pub damage: f64,
    /// Ticks between shots; 1 fires every tick.
    pub cooldown: u32,
}

/// Per-type statistics. Hit and shield points are the real unit values;
/// damage and cooldown are tuned for this simulator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitTable {
    pub marine: UnitStats,
    pub stalker: UnitStats,
    pub zealot: UnitStats,
    pub colossus: UnitStats,
}

impl Default for UnitTable {
    fn default() -> Self {
        Self {
            marine: UnitStats {
                max_hp: 45.0,
                max_shield: 0.0,
                damage: 6.0,
                cooldown: 1,
            },
            stalker: UnitStats {
                max_hp: 80.0,
                max_shield: 80.0,
                damage: 13.0,
                cooldown: 2,
            },
            zealot: UnitStats {
                max_hp: 100.0,
                max_shield: 50.0,
                damage: 8.0,
                cooldown: 1,
            },
            colossus: UnitStats {
                max_hp: 200.0,
                max_shield: 150.0,
                damage: 15.0,
                cooldown: 2,
            },
        }
    }
}

impl UnitTable {
    pub fn get(&self, t: UnitType) -> &UnitStats {
        match t {
            UnitType::Marine => &self.marine,
            UnitType::Stalker => &self.stalker,
            UnitType::Zealot => &self.zealot,
            UnitType::Colossus => &self.colossus,
        }
    }
}

/// Unit composition of one team, written like `3m` or `1c_3s_5z`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Roster(pub Vec<UnitType>);

impl Roster {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_mixed(&self) -> bool {
        self.0.windows(2).any(|w| w[0] != w[1])
    }
}

impl FromStr for Roster {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut units = Vec::new();
        for part in s.split('_') {
            let code = part
                .chars()
                .last()
                .and_then(UnitType::from_code)
                .ok_or_else(|| Error::config("roster", format!("bad group `{part}` in `{s}`")))?;
            let count: usize = part[..part.len() - 1]
                .parse()
                .map_err(|_| Error::config("roster", format!("bad count in `{part}`")))?;
            units.extend(std::iter::repeat_n(code, count));
        }
        if units.is_empty() {
            return Err(Error::config("roster", "empty roster"));
        }
        // canonical order: by type, so "3s_2z" and "2z_3s" agree
        units.sort();
        Ok(Roster(units))
    }
}

impl fmt::Display for Roster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        // colossi first, matching the usual map names
        for t in [UnitType::Colossus, UnitType::Stalker, UnitType::Zealot, UnitType::Marine] {
            let n = self.0.iter().filter(|u| **u == t).count();
            if n > 0 {
                parts.push(format!("{n}{}", t.code()));
            }
        }
        f.write_str(&parts.join("_"))
    }
}

impl Serialize for Roster {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Roster {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub allies: Roster,
    pub enemies: Roster,
    pub map_width: f64,
    pub map_height: f64,
    pub sight_range: f64,
    pub shoot_range: f64,
    pub episode_limit: usize,
    pub units: UnitTable,
    /// Horizontal distance of each team's formation from the map centre.
    pub spawn_offset: f64,
    /// Vertical gap between neighbouring units in a formation.
    pub spawn_spacing: f64,
    /// Uniform per-axis jitter applied to ally positions and mirrored to
    /// the enemy side.
    pub spawn_jitter: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::named("3m").expect("built-in scenario")
    }
}

impl ScenarioConfig {
    /// Built-in maps: `3m`, `5m`, `8m`, `2s_3z`, `3s_5z`, `1c_3s_5z`.
    pub fn named(name: &str) -> Result<Self> {
        let episode_limit = match name {
            "3m" | "5m" => 60,
            "8m" | "2s_3z" => 120,
            "3s_5z" => 150,
            "1c_3s_5z" => 200,
            other => {
                return Err(Error::config(
                    "scenario",
                    format!("unknown built-in scenario `{other}`"),
                ))
            }
        };
        let roster: Roster = name.parse()?;
        Ok(Self {
            name: name.to_string(),
            allies: roster.clone(),
            enemies: roster,
            map_width: 24.0,
            map_height: 16.0,
            sight_range: 9.0,
            shoot_range: 6.0,
            episode_limit,
            units: UnitTable::default(),
            spawn_offset: 5.0,
            spawn_spacing: 1.0,
            spawn_jitter: 0.5,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.allies != self.enemies {
            return Err(Error::config(
                "enemies",
                format!("rosters must match ({} vs {})", self.allies, self.enemies),
            ));
        }
        if self.shoot_range > self.sight_range {
            return Err(Error::config("shoot_range", "must not exceed sight_range"));
        }
        if self.shoot_range <= 0.0 || self.sight_range <= 0.0 {
            return Err(Error::config("sight_range", "ranges must be positive"));
        }
        if self.map_width <= 0.0 || self.map_height <= 0.0 {
            return Err(Error::config("map_width", "map extent must be positive"));
        }
        if self.episode_limit == 0 {
            return Err(Error::config("episode_limit", "must be at least 1"));
        }
        if 2.0 * (self.spawn_offset + self.spawn_jitter) > self.map_width {
            return Err(Error::config("spawn_offset", "formations do not fit the map"));
        }
        let span = (self.allies.len().saturating_sub(1)) as f64 * self.spawn_spacing
            + 2.0 * self.spawn_jitter;
        if span > self.map_height {
            return Err(Error::config("spawn_spacing", "formation taller than the map"));
        }
        for t in UnitType::ALL {
            let s = self.units.get(t);
            if s.max_hp <= 0.0 || s.damage < 0.0 || s.cooldown == 0 || s.max_shield < 0.0 {
                return Err(Error::config("units", format!("invalid stats for {t:?}")));
            }
        }
        Ok(())
    }

    /// Largest raw episode return: all enemy hit and shield points, the
    /// per-kill bonus, and the victory bonus.
    pub fn max_raw_return(&self) -> f64 {
        let pool: f64 = self
            .enemies
            .0
            .iter()
            .map(|t| {
                let s = self.units.get(*t);
                s.max_hp + s.max_shield
            })
            .sum();
        pool + super::KILL_BONUS * self.enemies.len() as f64 + super::WIN_BONUS
    }
}
