//! The episodic trajectory MDP: state encoding, joint-action decoding,
//! stepping the world, and sum-rate rewards under a mixed physical/virtual
//! fleet.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelParams, MovementConfig, Position, UAV_ALTITUDE};
use crate::error::{Error, Result};
use crate::fleet::DeploymentPlan;

/// Number of discrete headings per UAV (0°, 90°, 180°, 270°).
pub const HEADINGS: usize = 4;

/// Where every UAV starts an episode.
pub const HANGAR: Position = Position::new(0.0, 0.0, UAV_ALTITUDE);

/// How twin noise enters the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardNoiseMode {
    /// Each link to a virtual UAV gets its own noise sample before the
    /// max-over-UAVs reduction.
    PerLink,
    /// Noiseless sum rate plus a single Gaussian sample of variance
    /// `(M - K) * delta` (or `K * delta` in literal mode).
    Aggregate,
}

impl RewardNoiseMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RewardNoiseMode::PerLink => "per_link",
            RewardNoiseMode::Aggregate => "aggregate",
        }
    }
}

impl std::str::FromStr for RewardNoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_link" => Ok(RewardNoiseMode::PerLink),
            "aggregate" => Ok(RewardNoiseMode::Aggregate),
            other => Err(Error::domain(format!(
                "unknown reward noise mode {other:?} (expected per_link or aggregate)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_users: usize,
    pub m_uavs: usize,
    pub horizon: usize,
    pub channel: ChannelParams,
    pub movement: MovementConfig,
    pub plan: DeploymentPlan,
    pub noise_mode: RewardNoiseMode,
    /// Aggregate mode only: use `K * delta` as the noise variance.
    pub eq8_literal: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            n_users: 100,
            m_uavs: 4,
            horizon: 100,
            channel: ChannelParams::default(),
            movement: MovementConfig::default(),
            plan: DeploymentPlan::all_physical(4),
            noise_mode: RewardNoiseMode::PerLink,
            eq8_literal: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::domain("n_users must be >= 1"));
        }
        if self.m_uavs == 0 {
            return Err(Error::domain("m_uavs must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::domain("horizon must be >= 1"));
        }
        if self.plan.total != self.m_uavs {
            return Err(Error::domain(format!(
                "deployment plan covers {} UAVs but m_uavs = {}",
                self.plan.total, self.m_uavs
            )));
        }
        if self.m_uavs > 15 {
            return Err(Error::domain("joint action space 4^M overflows for M > 15"));
        }
        self.plan.validate()?;
        self.channel.validate()?;
        self.movement.validate()
    }

    pub fn action_count(&self) -> usize {
        HEADINGS.pow(self.m_uavs as u32)
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_users + 2 * self.m_uavs
    }

    /// The same environment with every UAV physical and the twin switched off.
    pub fn all_physical(&self) -> Self {
        Self {
            plan: DeploymentPlan::all_physical(self.m_uavs),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub users: Vec<Position>,
    pub uavs: Vec<Position>,
    pub slot: usize,
}

impl WorldState {
    /// Fresh episode over a fixed user layout: every UAV at the hangar.
    pub fn start(users: Vec<Position>, m_uavs: usize) -> Self {
        Self {
            users,
            uavs: vec![HANGAR; m_uavs],
            slot: 0,
        }
    }

    /// The same users with the UAVs back at the hangar.
    pub fn restart(&self) -> Self {
        Self::start(self.users.clone(), self.uavs.len())
    }
}

/// A joint heading choice for the whole fleet, encoded in base 4 with UAV 0
/// in the least significant digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JointAction(pub usize);

/// Places users uniformly at random and puts the fleet at the hangar.
pub fn reset<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> WorldState {
    let users = (0..cfg.n_users)
        .map(|_| {
            Position::new(
                rng.random_range(0.0..=cfg.movement.width),
                rng.random_range(0.0..=cfg.movement.height),
                0.0,
            )
        })
        .collect();
    WorldState::start(users, cfg.m_uavs)
}

/// Normalized `(x, y)` of every user followed by every UAV.
pub fn encode_state(w: &WorldState, movement: &MovementConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * (w.users.len() + w.uavs.len()));
    encode_state_into(w, movement, &mut out);
    out
}

pub fn encode_state_into(w: &WorldState, movement: &MovementConfig, out: &mut Vec<f64>) {
    out.clear();
    for p in w.users.iter().chain(&w.uavs) {
        out.push(p.x / movement.width);
        out.push(p.y / movement.height);
    }
}

/// Heading digits (0..4) for each UAV.
pub fn decode_digits(a: JointAction, m_uavs: usize) -> Result<Vec<usize>> {
    let count = HEADINGS
        .checked_pow(m_uavs as u32)
        .ok_or_else(|| Error::domain("joint action space overflows"))?;
    if a.0 >= count {
        return Err(Error::domain(format!(
            "action index {} out of range for {m_uavs} UAVs (max {})",
            a.0,
            count - 1
        )));
    }
    let mut rest = a.0;
    Ok((0..m_uavs)
        .map(|_| {
            let d = rest % HEADINGS;
            rest /= HEADINGS;
            d
        })
        .collect())
}

/// Headings in radians, digit `d` mapping to `d * 90°`.
pub fn decode_action(a: JointAction, m_uavs: usize) -> Result<Vec<f64>> {
    Ok(decode_digits(a, m_uavs)?
        .into_iter()
        .map(|d| d as f64 * FRAC_PI_2)
        .collect())
}

/// Rate of a link whose squared length is `dist_sq`.
#[inline]
fn link_rate(channel: &ChannelParams, dist_sq: f64) -> f64 {
    let attenuation = if channel.pathloss_exponent == 2.0 {
        channel.ref_distance * channel.ref_distance / dist_sq
    } else {
        (channel.ref_distance * channel.ref_distance / dist_sq).powf(0.5 * channel.pathloss_exponent)
    };
    let snr = channel.pathloss_gain * attenuation * channel.tx_power / channel.noise_power;
    channel.bandwidth * snr.ln_1p() * std::f64::consts::LOG2_E
}

#[inline]
fn dist_sq(a: &Position, b: &Position) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    dx * dx + dy * dy + dz * dz
}

fn check_link(d2: f64) -> Result<()> {
    if d2 > 0.0 {
        Ok(())
    } else {
        Err(Error::domain("user and UAV coincide; link distance is zero"))
    }
}

/// Noiseless sum over users of the best link rate.
pub fn sum_rate_noiseless(w: &WorldState, channel: &ChannelParams) -> Result<f64> {
    let mut total = 0.0;
    for u in &w.users {
        let mut best = f64::NEG_INFINITY;
        for v in &w.uavs {
            let d2 = dist_sq(u, v);
            check_link(d2)?;
            best = best.max(link_rate(channel, d2));
        }
        total += best;
    }
    Ok(total)
}

/// Sum over users of the best link rate under the deployment plan.
///
/// UAVs `0..K` are physical. Virtual UAVs contribute noisy rates in
/// [`RewardNoiseMode::PerLink`]; [`RewardNoiseMode::Aggregate`] adds one
/// noise sample to the noiseless total instead.
pub fn sum_rate<R: Rng + ?Sized>(
    w: &WorldState,
    plan: &DeploymentPlan,
    channel: &ChannelParams,
    mode: RewardNoiseMode,
    eq8_literal: bool,
    rng: &mut R,
) -> Result<f64> {
    if !plan.uses_twin() {
        return sum_rate_noiseless(w, channel);
    }
    match mode {
        RewardNoiseMode::PerLink => {
            let delta = plan.twin_noise;
            let mut total = 0.0;
            for u in &w.users {
                let mut best = f64::NEG_INFINITY;
                for (j, v) in w.uavs.iter().enumerate() {
                    let d2 = dist_sq(u, v);
                    check_link(d2)?;
                    let real = link_rate(channel, d2);
                    let rate = if j < plan.physical {
                        real
                    } else {
                        channel::perturb_rate(real, delta, rng)?
                    };
                    best = best.max(rate);
                }
                total += best;
            }
            Ok(total)
        }
        RewardNoiseMode::Aggregate => {
            let base = sum_rate_noiseless(w, channel)?;
            let count = if eq8_literal { plan.physical } else { plan.virtual_count() };
            let variance = count as f64 * plan.twin_noise;
            if variance == 0.0 {
                return Ok(base);
            }
            let z: f64 = rng.sample(StandardNormal);
            Ok(base + variance.sqrt() * z)
        }
    }
}

/// Moves the fleet by `a`, returning the next state, its reward and whether
/// the episode ended.
pub fn step<R: Rng + ?Sized>(
    w: &WorldState,
    a: JointAction,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<(WorldState, f64, bool)> {
    if w.slot >= cfg.horizon {
        return Err(Error::state(format!(
            "episode already finished at slot {} (horizon {})",
            w.slot, cfg.horizon
        )));
    }
    if w.uavs.len() != cfg.m_uavs {
        return Err(Error::domain("state UAV count does not match the configuration"));
    }
    let headings = decode_action(a, cfg.m_uavs)?;
    let uavs = w
        .uavs
        .iter()
        .zip(&headings)
        .map(|(p, h)| channel::fly(p, *h, &cfg.movement))
        .collect();
    let next = WorldState {
        users: w.users.clone(),
        uavs,
        slot: w.slot + 1,
    };
    let reward = sum_rate(&next, &cfg.plan, &cfg.channel, cfg.noise_mode, cfg.eq8_literal, rng)?;
    let done = next.slot == cfg.horizon;
    Ok((next, reward, done))
}

/// A deterministic map from encoded state to joint action.
pub trait Policy {
    fn act(&self, features: &[f64]) -> Result<JointAction>;
}

impl<F> Policy for F
where
    F: Fn(&[f64]) -> Result<JointAction>,
{
    fn act(&self, features: &[f64]) -> Result<JointAction> {
        self(features)
    }
}

/// Time-averaged sum rate of one all-physical episode from the hangar.
pub fn physical_episode_rate(cfg: &EnvConfig, users: &[Position], policy: &impl Policy) -> Result<f64> {
    let physical = cfg.all_physical();
    let mut w = WorldState::start(users.to_vec(), cfg.m_uavs);
    let mut features = Vec::with_capacity(cfg.state_dim());
    let mut total = 0.0;
    // All-physical steps are noiseless, so the stream is never drawn from.
    let mut no_noise = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    loop {
        encode_state_into(&w, &cfg.movement, &mut features);
        let a = policy.act(&features)?;
        let (next, reward, done) = step(&w, a, &physical, &mut no_noise)?;
        total += reward;
        w = next;
        if done {
            break;
        }
    }
    Ok(total / cfg.horizon as f64)
}

/// Mean over `episodes` of the time-averaged sum rate when every UAV flies
/// physically (the twin and its noise play no part).
pub fn evaluate_physical(
    cfg: &EnvConfig,
    users: &[Position],
    policy: &impl Policy,
    episodes: usize,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::domain("evaluation needs at least one episode"));
    }
    let mut acc = 0.0;
    for _ in 0..episodes {
        acc += physical_episode_rate(cfg, users, policy)?;
    }
    Ok(acc / episodes as f64)
}
