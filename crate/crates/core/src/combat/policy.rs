//! Scripted controllers: the enemy AI and the attack-closest ally baseline.
//!
//! Both pick the nearest living opponent (lowest index on ties), keep it
//! until it dies, fire when it is within shooting range and otherwise
//! step along the axis with the larger coordinate gap towards it.

use super::{CombatEnv, UnitState, ATTACK_BASE, MOVE_EAST, MOVE_NORTH, MOVE_SOUTH, MOVE_WEST, NOOP, STOP};

fn nearest(unit: &UnitState, opponents: &[UnitState]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, o) in opponents.iter().enumerate() {
        if !o.alive {
            continue;
        }
        let d = unit.distance_to(o);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

fn pursue(env: &CombatEnv, unit: &UnitState, opponents: &[UnitState]) -> (usize, Option<usize>) {
    if !unit.alive {
        return (NOOP, None);
    }
    let target = match unit.attack_target {
        Some(t) if opponents[t].alive => Some(t),
        _ => nearest(unit, opponents),
    };
    let Some(t) = target else {
        return (STOP, None);
    };
    let mask = env.unit_mask(unit, opponents);
    if mask[ATTACK_BASE + t] {
        return (ATTACK_BASE + t, Some(t));
    }
    let dx = opponents[t].x - unit.x;
    let dy = opponents[t].y - unit.y;
    let horizontal = if dx >= 0.0 { MOVE_EAST } else { MOVE_WEST };
    let vertical = if dy >= 0.0 { MOVE_NORTH } else { MOVE_SOUTH };
    let order = if dx.abs() >= dy.abs() {
        [horizontal, vertical]
    } else {
        [vertical, horizontal]
    };
    let action = order.into_iter().find(|a| mask[*a]).unwrap_or(STOP);
    (action, Some(t))
}

/// Enemy actions and the focus targets they commit to.
pub(crate) fn scripted_decisions(env: &CombatEnv) -> Vec<(usize, Option<usize>)> {
    env.enemies()
        .iter()
        .map(|u| pursue(env, u, env.allies()))
        .collect()
}

/// Joint action of the enemy team for the current world state.
pub fn scripted_enemy_policy(env: &CombatEnv) -> Vec<usize> {
    scripted_decisions(env).into_iter().map(|d| d.0).collect()
}

/// Fully observing baseline for the allied team: attack the closest enemy
/// and stay on it until it dies.
pub fn heuristic_ally_policy(env: &CombatEnv) -> Vec<usize> {
    env.allies()
        .iter()
        .map(|u| pursue(env, u, env.enemies()).0)
        .collect()
}
