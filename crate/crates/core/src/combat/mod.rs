//! Grid-world micro-combat between two symmetric armies.
//!
//! Allies are the learning agents; enemies follow a scripted
//! attack-the-nearest controller. Positions are continuous on a bounded
//! rectangle, moves are one map unit per tick, and range checks are
//! inclusive Euclidean distances.
//!
//! A tick resolves in this order: enemy decisions, movement of every
//! unit, then all attacks against pre-attack hit points, then deaths and
//! cooldowns. Attack availability is decided before movement, so a shot
//! that was legal at decision time always lands.

mod policy;
mod scenario;

pub use policy::{heuristic_ally_policy, scripted_enemy_policy};
pub use scenario::{Roster, ScenarioConfig, UnitStats, UnitTable, UnitType};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{check_joint_action, one_hot, EnvSpec, MultiAgentEnv, StepResult};
use crate::error::Result;

pub const KILL_BONUS: f64 = 10.0;
pub const WIN_BONUS: f64 = 200.0;
/// Largest achievable normalised episode return.
pub const MAX_RETURN: f64 = 20.0;

pub const NOOP: usize = 0;
pub const STOP: usize = 1;
pub const MOVE_NORTH: usize = 2;
pub const MOVE_SOUTH: usize = 3;
pub const MOVE_EAST: usize = 4;
pub const MOVE_WEST: usize = 5;
/// `ATTACK_BASE + k` attacks opposing unit `k`.
pub const ATTACK_BASE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Team {
    Ally,
    Enemy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitState {
    pub team: Team,
    pub unit_type: UnitType,
    pub x: f64,
    pub y: f64,
    pub health: f64,
    pub shield: f64,
    /// Ticks until the unit may fire again.
    pub cooldown: u32,
    pub alive: bool,
    /// Index into the opposing team that scripted control focuses on.
    pub attack_target: Option<usize>,
}

impl UnitState {
    pub fn distance_to(&self, other: &UnitState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Per-tick bookkeeping, exposed for tests and replay tooling.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TickInfo {
    pub damage_dealt: f64,
    pub damage_received: f64,
    pub enemies_killed: usize,
    pub allies_killed: usize,
    pub win_bonus_paid: bool,
    pub raw_reward: f64,
}

#[derive(Clone, Debug)]
pub struct CombatEnv {
    config: ScenarioConfig,
    allies: Vec<UnitState>,
    enemies: Vec<UnitState>,
    last_actions: Vec<usize>,
    steps: usize,
    done: bool,
    won: bool,
    reward_scale: f64,
    mixed: bool,
    has_shields: bool,
    max_cooldown: f64,
    last_tick: TickInfo,
}

impl CombatEnv {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let mixed = config.allies.is_mixed();
        let has_shields = config
            .allies
            .0
            .iter()
            .any(|t| config.units.get(*t).max_shield > 0.0);
        let max_cooldown = UnitType::ALL
            .iter()
            .map(|t| config.units.get(*t).cooldown)
            .max()
            .unwrap_or(1) as f64;
        let reward_scale = MAX_RETURN / config.max_raw_return();
        let mut env = Self {
            allies: Vec::new(),
            enemies: Vec::new(),
            last_actions: vec![NOOP; config.allies.len()],
            steps: 0,
            done: false,
            won: false,
            reward_scale,
            mixed,
            has_shields,
            max_cooldown,
            last_tick: TickInfo::default(),
            config,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn allies(&self) -> &[UnitState] {
        &self.allies
    }

    pub fn enemies(&self) -> &[UnitState] {
        &self.enemies
    }

    /// Direct access for building test positions.
    pub fn units_mut(&mut self) -> (&mut Vec<UnitState>, &mut Vec<UnitState>) {
        (&mut self.allies, &mut self.enemies)
    }

    pub fn last_actions(&self) -> &[usize] {
        &self.last_actions
    }

    pub fn last_tick(&self) -> &TickInfo {
        &self.last_tick
    }

    pub fn reward_scale(&self) -> f64 {
        self.reward_scale
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn type_dims(&self) -> usize {
        if self.mixed {
            UnitType::ALL.len()
        } else {
            0
        }
    }

    /// visible, distance, relative x, relative y, unit-type one-hot.
    fn slot_dim(&self) -> usize {
        4 + self.type_dims()
    }

    /// own health, own cooldown, own unit-type one-hot.
    fn own_dim(&self) -> usize {
        2 + self.type_dims()
    }

    /// centre-relative x, y, health, [shield], cooldown, unit-type one-hot.
    fn unit_state_dim(&self) -> usize {
        4 + usize::from(self.has_shields) + self.type_dims()
    }

    fn n_actions(&self) -> usize {
        ATTACK_BASE + self.config.enemies.len()
    }

    fn stats(&self, t: UnitType) -> &UnitStats {
        self.config.units.get(t)
    }

    fn in_bounds(&self, x: f64, y: f64) -> bool {
        (0.0..=self.config.map_width).contains(&x) && (0.0..=self.config.map_height).contains(&y)
    }

    pub(crate) fn move_delta(action: usize) -> Option<(f64, f64)> {
        match action {
            MOVE_NORTH => Some((0.0, 1.0)),
            MOVE_SOUTH => Some((0.0, -1.0)),
            MOVE_EAST => Some((1.0, 0.0)),
            MOVE_WEST => Some((-1.0, 0.0)),
            _ => None,
        }
    }

    /// Mask over `{noop, stop, N, S, E, W, attack[0..k]}` for any unit.
    pub(crate) fn unit_mask(&self, unit: &UnitState, opponents: &[UnitState]) -> Vec<bool> {
        let mut mask = vec![false; ATTACK_BASE + opponents.len()];
        if !unit.alive {
            mask[NOOP] = true;
            return mask;
        }
        mask[STOP] = true;
        for a in [MOVE_NORTH, MOVE_SOUTH, MOVE_EAST, MOVE_WEST] {
            let (dx, dy) = Self::move_delta(a).unwrap();
            mask[a] = self.in_bounds(unit.x + dx, unit.y + dy);
        }
        for (k, o) in opponents.iter().enumerate() {
            mask[ATTACK_BASE + k] = o.alive && unit.distance_to(o) <= self.config.shoot_range;
        }
        mask
    }

    /// Local observation of ally `agent`; all zeros once it is dead.
    pub fn build_observation(&self, agent: usize) -> Vec<f64> {
        let n_units = self.allies.len() + self.enemies.len();
        let mut obs = Vec::with_capacity(self.own_dim() + (n_units - 1) * self.slot_dim());
        let me = &self.allies[agent];
        let sight = self.config.sight_range;
        let td = self.type_dims();

        if me.alive {
            obs.push(me.health / self.stats(me.unit_type).max_hp);
            obs.push(f64::from(me.cooldown) / self.max_cooldown);
        } else {
            obs.extend([0.0, 0.0]);
        }
        if td > 0 {
            if me.alive {
                obs.extend(one_hot(me.unit_type.index(), td));
            } else {
                obs.extend(vec![0.0; td]);
            }
        }

        let others = self
            .allies
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != agent)
            .map(|(_, u)| u)
            .chain(self.enemies.iter());
        for other in others {
            let dist = me.distance_to(other);
            if me.alive && other.alive && dist <= sight {
                obs.push(1.0);
                obs.push(dist / sight);
                obs.push((other.x - me.x) / sight);
                obs.push((other.y - me.y) / sight);
                if td > 0 {
                    obs.extend(one_hot(other.unit_type.index(), td));
                }
            } else {
                obs.extend(std::iter::repeat_n(0.0, self.slot_dim()));
            }
        }
        obs
    }

    /// Global state: every unit's features followed by one-hot last
    /// actions of all allies.
    pub fn build_state(&self) -> Vec<f64> {
        let cx = self.config.map_width / 2.0;
        let cy = self.config.map_height / 2.0;
        let td = self.type_dims();
        let n_actions = self.n_actions();
        let mut s = Vec::new();
        for u in self.allies.iter().chain(self.enemies.iter()) {
            if !u.alive {
                s.extend(std::iter::repeat_n(0.0, self.unit_state_dim()));
                continue;
            }
            let stats = self.stats(u.unit_type);
            s.push((u.x - cx) / cx);
            s.push((u.y - cy) / cy);
            s.push(u.health / stats.max_hp);
            if self.has_shields {
                s.push(if stats.max_shield > 0.0 {
                    u.shield / stats.max_shield
                } else {
                    0.0
                });
            }
            s.push(f64::from(u.cooldown) / self.max_cooldown);
            if td > 0 {
                s.extend(one_hot(u.unit_type.index(), td));
            }
        }
        for &a in &self.last_actions {
            s.extend(one_hot(a, n_actions));
        }
        s
    }

    fn spawn(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.config;
        let cx = cfg.map_width / 2.0;
        let cy = cfg.map_height / 2.0;
        let n = cfg.allies.len();
        let mut allies = Vec::with_capacity(n);
        let mut enemies = Vec::with_capacity(n);
        for (i, (&at, &et)) in cfg.allies.0.iter().zip(&cfg.enemies.0).enumerate() {
            let j = cfg.spawn_jitter;
            let jx = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
            let jy = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
            let x = (cx - cfg.spawn_offset + jx).clamp(0.0, cfg.map_width);
            let y = (cy + (i as f64 - (n as f64 - 1.0) / 2.0) * cfg.spawn_spacing + jy)
                .clamp(0.0, cfg.map_height);
            let make = |team, t: UnitType, x, y| {
                let st = cfg.units.get(t);
                UnitState {
                    team,
                    unit_type: t,
                    x,
                    y,
                    health: st.max_hp,
                    shield: st.max_shield,
                    cooldown: 0,
                    alive: true,
                    attack_target: None,
                }
            };
            allies.push(make(Team::Ally, at, x, y));
            enemies.push(make(Team::Enemy, et, 2.0 * cx - x, y));
        }
        self.allies = allies;
        self.enemies = enemies;
    }

    /// Applies one tick given ally and enemy joint actions. Both action
    /// vectors must already be legal.
    fn resolve(&mut self, ally_actions: &[usize], enemy_actions: &[usize], enemy_targets: &[Option<usize>]) {
        let mut info = TickInfo::default();

        // movement
        for (u, &a) in self.allies.iter_mut().zip(ally_actions) {
            if let Some((dx, dy)) = Self::move_delta(a) {
                u.x += dx;
                u.y += dy;
            }
        }
        for (u, &a) in self.enemies.iter_mut().zip(enemy_actions) {
            if let Some((dx, dy)) = Self::move_delta(a) {
                u.x += dx;
                u.y += dy;
            }
        }

        // attacks against pre-attack hit points
        let mut incoming_enemy = vec![0.0; self.enemies.len()];
        let mut incoming_ally = vec![0.0; self.allies.len()];
        let mut fired_ally = vec![false; self.allies.len()];
        let mut fired_enemy = vec![false; self.enemies.len()];
        for (i, (u, &a)) in self.allies.iter().zip(ally_actions).enumerate() {
            if a >= ATTACK_BASE && u.alive && u.cooldown == 0 {
                incoming_enemy[a - ATTACK_BASE] += self.config.units.get(u.unit_type).damage;
                fired_ally[i] = true;
            }
        }
        for (i, (u, &a)) in self.enemies.iter().zip(enemy_actions).enumerate() {
            if a >= ATTACK_BASE && u.alive && u.cooldown == 0 {
                incoming_ally[a - ATTACK_BASE] += self.config.units.get(u.unit_type).damage;
                fired_enemy[i] = true;
            }
        }
        let apply = |u: &mut UnitState, dmg: f64| -> (f64, bool) {
            if !u.alive || dmg <= 0.0 {
                return (0.0, false);
            }
            let pool = u.shield + u.health;
            let absorbed = dmg.min(u.shield);
            u.shield -= absorbed;
            u.health = (u.health - (dmg - absorbed)).max(0.0);
            let removed = pool - (u.shield + u.health);
            if u.health <= 0.0 {
                u.alive = false;
                u.health = 0.0;
                u.shield = 0.0;
                u.attack_target = None;
                return (removed, true);
            }
            (removed, false)
        };
        for (u, dmg) in self.enemies.iter_mut().zip(&incoming_enemy) {
            let (removed, killed) = apply(u, *dmg);
            info.damage_dealt += removed;
            info.enemies_killed += usize::from(killed);
        }
        for (u, dmg) in self.allies.iter_mut().zip(&incoming_ally) {
            let (removed, killed) = apply(u, *dmg);
            info.damage_received += removed;
            info.allies_killed += usize::from(killed);
        }

        // cooldowns: firing resets, then every unit ticks down
        for (u, fired) in self.allies.iter_mut().zip(&fired_ally) {
            if *fired {
                u.cooldown = self.config.units.get(u.unit_type).cooldown;
            }
            u.cooldown = u.cooldown.saturating_sub(1);
        }
        for (u, fired) in self.enemies.iter_mut().zip(&fired_enemy) {
            if *fired {
                u.cooldown = self.config.units.get(u.unit_type).cooldown;
            }
            u.cooldown = u.cooldown.saturating_sub(1);
        }

        // persistent focus targets
        for (u, t) in self.enemies.iter_mut().zip(enemy_targets) {
            if u.alive {
                u.attack_target = *t;
            }
        }
        for (u, &a) in self.allies.iter_mut().zip(ally_actions) {
            if u.alive && a >= ATTACK_BASE {
                u.attack_target = Some(a - ATTACK_BASE);
            }
        }
        for u in self.allies.iter_mut() {
            if let Some(t) = u.attack_target {
                if !self.enemies[t].alive {
                    u.attack_target = None;
                }
            }
        }
        for u in self.enemies.iter_mut() {
            if let Some(t) = u.attack_target {
                if !self.allies[t].alive {
                    u.attack_target = None;
                }
            }
        }

        let enemies_left = self.enemies.iter().any(|u| u.alive);
        let allies_left = self.allies.iter().any(|u| u.alive);
        info.win_bonus_paid = !enemies_left && info.enemies_killed > 0;
        info.raw_reward = info.damage_dealt
            + KILL_BONUS * info.enemies_killed as f64
            + if info.win_bonus_paid { WIN_BONUS } else { 0.0 };
        self.won = !enemies_left && allies_left;
        self.last_tick = info;
    }
}

impl MultiAgentEnv for CombatEnv {
    fn spec(&self) -> EnvSpec {
        let n_units = self.config.allies.len() + self.config.enemies.len();
        EnvSpec {
            n_agents: self.config.allies.len(),
            n_actions: self.n_actions(),
            obs_dim: self.own_dim() + (n_units - 1) * self.slot_dim(),
            state_dim: n_units * self.unit_state_dim()
                + self.config.allies.len() * self.n_actions(),
            episode_limit: self.config.episode_limit,
            gamma: 0.99,
        }
    }

    fn reset(&mut self, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.spawn(seed);
        self.last_actions = vec![NOOP; self.allies.len()];
        self.steps = 0;
        self.done = false;
        self.won = false;
        self.last_tick = TickInfo::default();
        (self.observations(), self.state())
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.allies.len())
            .map(|a| self.build_observation(a))
            .collect()
    }

    fn state(&self) -> Vec<f64> {
        self.build_state()
    }

    fn available_actions(&self, agent: usize) -> Vec<bool> {
        self.unit_mask(&self.allies[agent], &self.enemies)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(crate::Error::Contract(
                "step called on a finished episode".into(),
            ));
        }
        check_joint_action(self, actions)?;
        let decisions = policy::scripted_decisions(self);
        let enemy_actions: Vec<usize> = decisions.iter().map(|d| d.0).collect();
        let enemy_targets: Vec<Option<usize>> = decisions.iter().map(|d| d.1).collect();
        self.resolve(actions, &enemy_actions, &enemy_targets);
        self.last_actions = actions.to_vec();
        self.steps += 1;

        let enemies_left = self.enemies.iter().any(|u| u.alive);
        let allies_left = self.allies.iter().any(|u| u.alive);
        let terminated = !enemies_left || !allies_left;
        let truncated = !terminated && self.steps >= self.config.episode_limit;
        self.done = terminated || truncated;
        Ok(StepResult {
            reward: self.last_tick.raw_reward * self.reward_scale,
            terminated,
            truncated,
        })
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn won(&self) -> bool {
        self.won
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(name: &str) -> CombatEnv {
        CombatEnv::new(ScenarioConfig::named(name).unwrap()).unwrap()
    }

    /// Places every unit explicitly; units not listed are killed.
    fn place(env: &mut CombatEnv, allies: &[(f64, f64)], enemies: &[(f64, f64)]) {
        let (a, e) = env.units_mut();
        for (i, u) in a.iter_mut().enumerate() {
            match allies.get(i) {
                Some(&(x, y)) => {
                    u.x = x;
                    u.y = y;
                }
                None => {
                    u.alive = false;
                    u.health = 0.0;
                }
            }
        }
        for (i, u) in e.iter_mut().enumerate() {
            match enemies.get(i) {
                Some(&(x, y)) => {
                    u.x = x;
                    u.y = y;
                }
                None => {
                    u.alive = false;
                    u.health = 0.0;
                }
            }
        }
    }

    #[test]
    fn dims_match_spec() {
        for name in ["3m", "2s_3z", "1c_3s_5z"] {
            let mut e = env(name);
            let spec = e.spec();
            let (obs, state) = e.reset(7);
            assert_eq!(obs.len(), spec.n_agents);
            assert!(obs.iter().all(|o| o.len() == spec.obs_dim));
            assert_eq!(state.len(), spec.state_dim);
            spec.validate().unwrap();
        }
    }

    #[test]
    fn out_of_sight_slot_is_zero() {
        let mut e = env("3m");
        e.reset(0);
        place(&mut e, &[(5.0, 8.0)], &[(15.0, 8.0)]);
        let obs = e.build_observation(0);
        // own (2) + two ally slots (8) then the first enemy slot
        assert!(obs[10..14].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn distance_is_normalised_by_sight() {
        let mut e = env("3m");
        e.reset(0);
        place(&mut e, &[(5.0, 8.0)], &[(9.5, 8.0)]);
        let obs = e.build_observation(0);
        assert_eq!(&obs[10..14], &[1.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn observation_has_no_absolute_coordinates() {
        let mut e = env("3m");
        e.reset(0);
        place(&mut e, &[(5.0, 8.0)], &[(9.5, 8.0)]);
        let a = e.build_observation(0);
        place(&mut e, &[(6.0, 3.0)], &[(10.5, 3.0)]);
        let b = e.build_observation(0);
        assert_eq!(a, b);
    }

    #[test]
    fn state_centre_and_health_features() {
        let mut e = env("3m");
        e.reset(0);
        place(&mut e, &[(12.0, 8.0)], &[(15.0, 8.0)]);
        let s = e.build_state();
        assert_eq!(&s[..3], &[0.0, 0.0, 1.0]);
        let dim = e.spec().state_dim;
        let actions = [STOP, NOOP, NOOP];
        e.step(&actions).unwrap();
        assert_eq!(e.build_state().len(), dim);
    }

    #[test]
    fn attack_range_is_inclusive() {
        let mut e = env("3m");
        e.reset(0);
        place(&mut e, &[(5.0, 8.0)], &[(11.0, 8.0)]);
        assert!(e.available_actions(0)[ATTACK_BASE]);
        place(&mut e, &[(5.0, 8.0)], &[(11.1, 8.0)]);
        assert!(!e.available_actions(0)[ATTACK_BASE]);
    }

    #[test]
    fn dead_agent_only_noops() {
        let mut e = env("3m");
        e.reset(0);
        place(&mut e, &[(5.0, 8.0)], &[(11.0, 8.0)]);
        let mask = e.available_actions(2);
        assert!(mask[NOOP]);
        assert_eq!(mask.iter().filter(|m| **m).count(), 1);
        assert!(e.build_observation(2).iter().all(|v| *v == 0.0));
        assert!(e.step(&[STOP, NOOP, STOP]).is_err());
    }

    #[test]
    fn moves_blocked_at_border() {
        let mut e = env("3m");
        e.reset(0);
        place(&mut e, &[(0.5, 8.0)], &[(20.0, 8.0)]);
        let m = e.available_actions(0);
        assert!(!m[MOVE_WEST] && m[MOVE_EAST] && m[MOVE_NORTH] && m[MOVE_SOUTH]);
        assert!(!m[NOOP]);
    }

    #[test]
    fn shield_absorbs_first() {
        let mut e = env("3m");
        e.reset(0);
        place(&mut e, &[(5.0, 8.0)], &[(20.0, 8.0), (20.0, 9.0), (20.0, 10.0)]);
        {
            let (a, en) = e.units_mut();
            a[0].unit_type = UnitType::Marine;
            en[0].x = 11.0;
            en[0].shield = 5.0;
            en[0].health = 45.0;
        }
        e.config.units.marine.damage = 9.0;
        e.step(&[ATTACK_BASE, NOOP, NOOP]).unwrap();
        assert_eq!(e.enemies()[0].shield, 0.0);
        assert_eq!(e.enemies()[0].health, 41.0);
        assert_eq!(e.last_tick().damage_dealt, 9.0);
    }

    #[test]
    fn reward_normalisation_arithmetic() {
        let e = env("3m");
        // 3·45 + 3·10 + 200 = 365 raw points map to 20
        assert!((e.reward_scale() * 365.0 - 20.0).abs() < 1e-12);
        let mut c = ScenarioConfig::named("3m").unwrap();
        c.units.marine.max_hp = (400.0 - 230.0) / 3.0;
        let e = CombatEnv::new(c).unwrap();
        assert!((20.0 * e.reward_scale() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kill_pays_bonus_and_ends_episode() {
        let mut e = env("3m");
        e.reset(0);
        place(&mut e, &[(5.0, 8.0), (5.5, 8.0)], &[(11.0, 8.0)]);
        e.units_mut().1[0].health = 6.0;
        let r = e.step(&[ATTACK_BASE, ATTACK_BASE, NOOP]).unwrap();
        assert!(r.terminated && e.won());
        let t = e.last_tick();
        assert!(t.win_bonus_paid);
        assert_eq!(t.damage_dealt, 6.0);
        assert_eq!(t.raw_reward, 6.0 + KILL_BONUS + WIN_BONUS);
        assert!(e.step(&[STOP, STOP, NOOP]).is_err());
    }

    #[test]
    fn limit_truncates_as_loss() {
        let mut c = ScenarioConfig::named("3m").unwrap();
        c.episode_limit = 3;
        c.spawn_offset = 11.0;
        c.spawn_jitter = 0.0;
        let mut e = CombatEnv::new(c).unwrap();
        e.reset(1);
        let mut last = None;
        for _ in 0..3 {
            let acts: Vec<usize> = (0..3)
                .map(|a| if e.available_actions(a)[MOVE_WEST] { MOVE_WEST } else { STOP })
                .collect();
            last = Some(e.step(&acts).unwrap());
        }
        let last = last.unwrap();
        assert!(last.truncated && !last.terminated && !e.won());
        assert_eq!(e.steps(), 3);
    }
}
