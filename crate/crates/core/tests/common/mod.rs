//! Exact dynamic-programming oracle for a single UAV serving a single user
//! on a small lattice.

use std::collections::HashMap;

use twinforge::channel::{rate_real, MovementConfig, Position};
use twinforge::dqn::{self, greedy_action, TrainConfig};
use twinforge::env::{self, EnvConfig, HANGAR};
use twinforge::fleet::DeploymentPlan;

pub const SIDE: f64 = 32.0;
pub const HORIZON: usize = 10;

pub fn env_cfg() -> EnvConfig {
    EnvConfig {
        n_users: 1,
        m_uavs: 1,
        horizon: HORIZON,
        plan: DeploymentPlan::all_physical(1),
        movement: MovementConfig {
            width: SIDE,
            height: SIDE,
            ..MovementConfig::default()
        },
        ..EnvConfig::default()
    }
}

/// Best achievable mean per-slot rate, by exhaustive backward induction
/// over the integer lattice the UAV can reach from the hangar.
pub fn optimal_mean_rate(cfg: &EnvConfig, user: Position) -> f64 {
    let step = cfg.movement.step_length();
    let moves = [(step, 0.0), (0.0, step), (-step, 0.0), (0.0, -step)];
    let clamp = |v: f64| v.clamp(0.0, SIDE);
    let key = |x: f64, y: f64| ((x * 1e6).round() as i64, (y * 1e6).round() as i64);
    let reward = |x: f64, y: f64| {
        let d = ((x - user.x).powi(2) + (y - user.y).powi(2) + (HANGAR.z - user.z).powi(2)).sqrt();
        rate_real(&cfg.channel, d).unwrap()
    };
    // Reachable lattice points.
    let mut points = vec![(HANGAR.x, HANGAR.y)];
    let mut i = 0;
    while i < points.len() {
        let (x, y) = points[i];
        for (dx, dy) in moves {
            let p = (clamp(x + dx), clamp(y + dy));
            if !points.iter().any(|q| key(q.0, q.1) == key(p.0, p.1)) {
                points.push(p);
            }
        }
        i += 1;
    }
    let mut value: HashMap<(i64, i64), f64> = points.iter().map(|p| (key(p.0, p.1), 0.0)).collect();
    for _ in 0..cfg.horizon {
        let next: HashMap<(i64, i64), f64> = points
            .iter()
            .map(|&(x, y)| {
                let best = moves
                    .iter()
                    .map(|(dx, dy)| {
                        let (nx, ny) = (clamp(x + dx), clamp(y + dy));
                        reward(nx, ny) + value[&key(nx, ny)]
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                (key(x, y), best)
            })
            .collect();
        value = next;
    }
    value[&key(HANGAR.x, HANGAR.y)] / cfg.horizon as f64
}

/// Greedy-policy rate and exact optimum after the standard 500-episode run.
pub fn dqn_against_oracle(seed: u64) -> (f64, f64) {
    let cfg = env_cfg();
    let tcfg = TrainConfig {
        episodes: 500,
        hidden: vec![64, 64],
        batch: 32,
        buffer_capacity: 5000,
        eval_every: 10,
        eval_episodes: 1,
        seed,
        ..TrainConfig::default()
    };
    let out = dqn::train(&cfg, &tcfg).unwrap();
    let head = tcfg.q_head(&cfg);
    let policy = |s: &[f64]| greedy_action(&out.policy, head, s);
    let achieved = env::evaluate_physical(&cfg, &out.users, &policy, 1).unwrap();
    (achieved, optimal_mean_rate(&cfg, out.users[0]))
}
