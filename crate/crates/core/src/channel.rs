//! Physical-layer math: link distances, SNR, real and twin-simulated rates,
//! and the constant-speed kinematics of a UAV over one slot.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed altitude of every UAV, in meters.
pub const UAV_ALTITUDE: f64 = 5.0;

/// A point in the world, in meters. Users sit on the ground (`z = 0`), UAVs
/// fly at [`UAV_ALTITUDE`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Constants of the log-distance path-loss Shannon link.
///
/// `bandwidth` scales every rate. The default of `1.0` reports rates as
/// spectral efficiency (bit/s/Hz), which is the unit the reward and the
/// utility objective are written in; set it to `1e6` for bit/s over a 1 MHz
/// channel. `noise_power` is the thermal floor over the physical 1 MHz
/// channel (-174 dBm/Hz + 60 dB) and does not depend on `bandwidth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub bandwidth: f64,
    pub pathloss_gain: f64,
    pub ref_distance: f64,
    pub pathloss_exponent: f64,
    pub tx_power: f64,
    pub noise_power: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            bandwidth: 1.0,
            pathloss_gain: 1e-6,
            ref_distance: 1.0,
            pathloss_exponent: 3.0,
            tx_power: 0.1,
            noise_power: dbm_to_watts(-174.0 + 60.0),
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("bandwidth", self.bandwidth),
            ("pathloss_gain", self.pathloss_gain),
            ("ref_distance", self.ref_distance),
            ("pathloss_exponent", self.pathloss_exponent),
            ("tx_power", self.tx_power),
            ("noise_power", self.noise_power),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.pathloss_exponent < 1.0 {
            return Err(Error::domain(format!(
                "pathloss_exponent must be >= 1, got {}",
                self.pathloss_exponent
            )));
        }
        Ok(())
    }
}

/// Converts a power level in dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Per-slot motion constraints and the rectangular world `[0, width] x [0, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovementConfig {
    pub speed: f64,
    pub slot_dt: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for MovementConfig {
    fn default() -> Self {
        Self {
            speed: 8.0,
            slot_dt: 1.0,
            width: 100.0,
            height: 100.0,
        }
    }
}

impl MovementConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("speed", self.speed),
            ("slot_dt", self.slot_dt),
            ("width", self.width),
            ("height", self.height),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Distance covered in one slot.
    pub fn step_length(&self) -> f64 {
        self.speed * self.slot_dt
    }

    pub fn contains(&self, p: &Position) -> bool {
        p.is_finite()
            && (0.0..=self.width).contains(&p.x)
            && (0.0..=self.height).contains(&p.y)
            && p.z >= 0.0
    }
}

pub fn distance(a: &Position, b: &Position) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Received SNR over a link of length `dist`.
pub fn snr(params: &ChannelParams, dist: f64) -> Result<f64> {
    if !(dist > 0.0 && dist.is_finite()) {
        return Err(Error::domain(format!("link distance must be > 0, got {dist}")));
    }
    let gain = params.pathloss_gain * (params.ref_distance / dist).powf(params.pathloss_exponent);
    Ok(gain * params.tx_power / params.noise_power)
}

/// Shannon rate of a link between a user and a physically deployed UAV.
pub fn rate_real(params: &ChannelParams, dist: f64) -> Result<f64> {
    Ok(params.bandwidth * (1.0 + snr(params, dist)?).log2())
}

/// Rate of a link to a twin-generated UAV: the real rate plus zero-mean
/// Gaussian noise of variance `delta`, floored at zero.
///
/// With `delta == 0` no sample is drawn and the result equals
/// [`rate_real`] bit for bit.
pub fn rate_virtual<R: Rng + ?Sized>(
    params: &ChannelParams,
    dist: f64,
    delta: f64,
    rng: &mut R,
) -> Result<f64> {
    let real = rate_real(params, dist)?;
    perturb_rate(real, delta, rng)
}

/// Applies twin noise of variance `delta` to an already computed real rate.
pub fn perturb_rate<R: Rng + ?Sized>(real: f64, delta: f64, rng: &mut R) -> Result<f64> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::domain(format!("twin noise variance must be >= 0, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(real);
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok((real + delta.sqrt() * z).max(0.0))
}

/// Moves a UAV one slot along `heading` (radians, counter-clockwise from +x)
/// at constant speed, clamping the result to the world bounds.
pub fn fly(pos: &Position, heading: f64, cfg: &MovementConfig) -> Position {
    let step = cfg.step_length();
    let x = pos.x + step * heading.cos();
    let y = pos.y + step * heading.sin();
    Position {
        x: x.clamp(0.0, cfg.width),
        y: y.clamp(0.0, cfg.height),
        z: pos.z,
    }
}
