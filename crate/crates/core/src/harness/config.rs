//! Experiment configuration: flat `key = value` lines grouped under
//! `[section]` headers, `#` comments.
//!
//! Every key belongs to exactly one section. Keys written before the first
//! header are resolved by name, so a one-line file such as `m_uavs = 4` is
//! valid. Unknown keys, duplicates and keys under the wrong header are
//! rejected with the offending line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::channel::{dbm_to_watts, ChannelParams, MovementConfig};
use crate::dqn::{HeadKind, TrainConfig};
use crate::env::{EnvConfig, RewardNoiseMode};
use crate::error::{Error, Result};
use crate::fleet::{DeploymentPlan, TwinEconomics};
use crate::tuner::TunerConfig;

/// How a run deploys its fleet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// Every UAV physical, no twin.
    PhysicalOnly,
    /// A fixed plan with `physical` physical UAVs and twin noise `delta`.
    FixedDt { physical: usize, delta: f64 },
    /// The plan chosen by the trained selector network.
    TunedDt,
}

impl Scheme {
    pub fn kind(&self) -> &'static str {
        match self {
            Scheme::PhysicalOnly => "physical_only",
            Scheme::FixedDt { .. } => "fixed_dt",
            Scheme::TunedDt => "tuned_dt",
        }
    }
}

/// Economics coefficient varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Beta,
    /// Scales `alpha` and `zeta` together.
    CostWeight,
}

impl SweepParam {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::CostWeight => "cost_weight",
        }
    }

    /// The economics at sweep value `v`.
    pub fn apply(&self, base: &TwinEconomics, v: f64) -> TwinEconomics {
        match self {
            SweepParam::Alpha => TwinEconomics { alpha: v, ..*base },
            SweepParam::Beta => TwinEconomics { beta: v, ..*base },
            SweepParam::CostWeight => base.with_cost_weight(v),
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            "cost_weight" => Ok(SweepParam::CostWeight),
            other => Err(Error::domain(format!(
                "unknown sweep parameter {other:?} (expected alpha, beta or cost_weight)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// Grid and seeding of the performance surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSpec {
    pub deltas: Vec<f64>,
    pub ks: Vec<usize>,
    pub seeds_per_cell: usize,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            deltas: vec![0.0, 0.4, 0.8, 1.2, 1.6],
            ks: vec![0, 1, 2, 3, 4],
            seeds_per_cell: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Environment; its plan is replaced per scheme.
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub econ: TwinEconomics,
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    pub sweep: Option<Sweep>,
    pub surface: SurfaceSpec,
    pub tuner: TunerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            econ: TwinEconomics::default(),
            schemes: vec![Scheme::PhysicalOnly],
            seeds: vec![0, 1, 2, 3, 4],
            sweep: None,
            surface: SurfaceSpec::default(),
            tuner: TunerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.econ.validate()?;
        if self.schemes.is_empty() {
            return Err(Error::domain("at least one scheme is required"));
        }
        for s in &self.schemes {
            if let Scheme::FixedDt { physical, delta } = *s {
                DeploymentPlan::new(self.env.m_uavs, physical, delta)?;
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::domain("at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::domain("seeds must be distinct"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::domain("sweep needs at least one value"));
            }
            for &v in &sweep.values {
                if !v.is_finite() {
                    return Err(Error::domain(format!("sweep value {v} is not finite")));
                }
                sweep.param.apply(&self.econ, v).validate()?;
            }
        }
        let s = &self.surface;
        if s.deltas.is_empty() || s.ks.is_empty() {
            return Err(Error::domain("surface grid must be non-empty"));
        }
        if s.deltas.windows(2).any(|w| w[0] >= w[1]) || s.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("surface grid values must be strictly ascending"));
        }
        if s.deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::domain("surface deltas must be finite and >= 0"));
        }
        if let Some(k) = s.ks.iter().find(|k| **k > self.env.m_uavs) {
            return Err(Error::domain(format!(
                "surface K={k} exceeds m_uavs = {}",
                self.env.m_uavs
            )));
        }
        if s.seeds_per_cell == 0 {
            return Err(Error::domain("seeds_per_cell must be >= 1"));
        }
        if !(self.tuner.lr.is_finite() && self.tuner.lr > 0.0) {
            return Err(Error::domain("lr_g must be finite and > 0"));
        }
        if self.tuner.hidden.contains(&0) {
            return Err(Error::domain("hidden_g widths must be >= 1"));
        }
        Ok(())
    }

    /// Economics points the experiment visits: one per sweep value, or the
    /// base point.
    pub fn econ_points(&self) -> Vec<(Option<f64>, TwinEconomics)> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| (Some(v), s.param.apply(&self.econ, v))).collect(),
            None => vec![(None, self.econ)],
        }
    }

    /// Seeds used for each surface cell: the leading run seeds, extended
    /// past the largest run seed when more are needed.
    pub fn surface_seeds(&self) -> Vec<u64> {
        let max = self.seeds.iter().copied().max().unwrap_or(0);
        (0..self.surface.seeds_per_cell)
            .map(|i| {
                self.seeds
                    .get(i)
                    .copied()
                    .unwrap_or_else(|| max + 1 + (i - self.seeds.len()) as u64)
            })
            .collect()
    }
}

/// `(section, key)` pairs the parser accepts.
const KEYS: &[(&str, &str)] = &[
    ("env", "n_users"),
    ("env", "m_uavs"),
    ("env", "horizon"),
    ("env", "reward_noise_mode"),
    ("env", "eq8_literal"),
    ("channel", "bandwidth"),
    ("channel", "pathloss_gain"),
    ("channel", "ref_distance"),
    ("channel", "pathloss_exponent"),
    ("channel", "tx_power"),
    ("channel", "noise_power"),
    ("channel", "noise_power_dbm"),
    ("movement", "speed"),
    ("movement", "slot_dt"),
    ("movement", "width"),
    ("movement", "height"),
    ("economics", "alpha"),
    ("economics", "beta"),
    ("economics", "zeta"),
    ("economics", "eta"),
    ("train", "episodes"),
    ("train", "gamma"),
    ("train", "lr_q"),
    ("train", "momentum"),
    ("train", "batch"),
    ("train", "buffer_capacity"),
    ("train", "eps_start"),
    ("train", "eps_end"),
    ("train", "eps_decay_fraction"),
    ("train", "target_sync_every"),
    ("train", "update_every"),
    ("train", "hidden"),
    ("train", "head"),
    ("train", "eval_every"),
    ("train", "eval_episodes"),
    ("train", "eq7_literal"),
    ("scheme", "schemes"),
    ("scheme", "physical_k"),
    ("scheme", "twin_noise"),
    ("run", "seeds"),
    ("sweep", "param"),
    ("sweep", "values"),
    ("tuner", "deltas"),
    ("tuner", "ks"),
    ("tuner", "seeds_per_cell"),
    ("tuner", "lr_g"),
    ("tuner", "steps"),
    ("tuner", "hidden_g"),
    ("tuner", "tuner_seed"),
];

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

struct Entries {
    path: String,
    values: BTreeMap<&'static str, (String, usize)>,
}

impl Entries {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            msg: msg.into(),
        }
    }

    fn line(&self, key: &str) -> usize {
        self.values.get(key).map_or(0, |(_, l)| *l)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some((raw, line)) => raw
                .parse()
                .map_err(|e| self.err(*line, format!("{key}: cannot parse {raw:?}: {e}"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some((raw, line)) => raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| self.err(*line, format!("{key}: cannot parse {s:?}: {e}")))
                })
                .collect(),
        }
    }
}

/// Parses configuration text; `origin` names the source in error messages.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let mut entries = Entries {
        path: origin.to_string(),
        values: BTreeMap::new(),
    };
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| entries.err(line_no, format!("malformed section header {line:?}")))?
                .trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(entries.err(line_no, format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| entries.err(line_no, format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let home = section_of(key).ok_or_else(|| entries.err(line_no, format!("unknown key {key:?}")))?;
        if let Some(s) = &section {
            if s != home {
                return Err(entries.err(line_no, format!("key {key:?} belongs in [{home}], not [{s}]")));
            }
        }
        let key: &'static str = KEYS.iter().find(|(_, k)| *k == key).map(|(_, k)| *k).unwrap();
        if let Some((_, first)) = entries.values.insert(key, (value.to_string(), line_no)) {
            return Err(entries.err(line_no, format!("duplicate key {key:?} (first set on line {first})")));
        }
    }
    resolve(&entries)
}

fn resolve(e: &Entries) -> Result<ExperimentConfig> {
    let d = ExperimentConfig::default();
    let at = |key: &str, r: Result<()>| r.map_err(|err| e.err(e.line(key), err.to_string()));

    let m_uavs = e.get("m_uavs", d.env.m_uavs)?;
    let cd = d.env.channel;
    if e.values.contains_key("noise_power") && e.values.contains_key("noise_power_dbm") {
        return Err(e.err(e.line("noise_power_dbm"), "set noise_power or noise_power_dbm, not both"));
    }
    let noise_power = match e.values.contains_key("noise_power_dbm") {
        true => dbm_to_watts(e.get("noise_power_dbm", 0.0)?),
        false => e.get("noise_power", cd.noise_power)?,
    };
    let channel = ChannelParams {
        bandwidth: e.get("bandwidth", cd.bandwidth)?,
        pathloss_gain: e.get("pathloss_gain", cd.pathloss_gain)?,
        ref_distance: e.get("ref_distance", cd.ref_distance)?,
        pathloss_exponent: e.get("pathloss_exponent", cd.pathloss_exponent)?,
        tx_power: e.get("tx_power", cd.tx_power)?,
        noise_power,
    };
    at("pathloss_gain", channel.validate())?;
    let md = d.env.movement;
    let movement = MovementConfig {
        speed: e.get("speed", md.speed)?,
        slot_dt: e.get("slot_dt", md.slot_dt)?,
        width: e.get("width", md.width)?,
        height: e.get("height", md.height)?,
    };
    at("speed", movement.validate())?;
    let env = EnvConfig {
        n_users: e.get("n_users", d.env.n_users)?,
        m_uavs,
        horizon: e.get("horizon", d.env.horizon)?,
        channel,
        movement,
        plan: DeploymentPlan::all_physical(m_uavs),
        noise_mode: e.get::<RewardNoiseMode>("reward_noise_mode", d.env.noise_mode)?,
        eq8_literal: e.get("eq8_literal", d.env.eq8_literal)?,
    };
    at("m_uavs", env.validate())?;

    let econ = TwinEconomics {
        alpha: e.get("alpha", d.econ.alpha)?,
        beta: e.get("beta", d.econ.beta)?,
        zeta: e.get("zeta", d.econ.zeta)?,
        eta: e.get("eta", d.econ.eta)?,
    };
    let bad_econ = ["alpha", "beta", "zeta", "eta"]
        .into_iter()
        .filter(|k| e.values.contains_key(k))
        .map(|k| e.line(k))
        .max()
        .unwrap_or(0);
    econ.validate().map_err(|err| e.err(bad_econ, err.to_string()))?;

    let td = &d.train;
    let train = TrainConfig {
        episodes: e.get("episodes", td.episodes)?,
        gamma: e.get("gamma", td.gamma)?,
        lr_q: e.get("lr_q", td.lr_q)?,
        momentum: e.get("momentum", td.momentum)?,
        batch: e.get("batch", td.batch)?,
        buffer_capacity: e.get("buffer_capacity", td.buffer_capacity)?,
        eps_start: e.get("eps_start", td.eps_start)?,
        eps_end: e.get("eps_end", td.eps_end)?,
        eps_decay_fraction: e.get("eps_decay_fraction", td.eps_decay_fraction)?,
        target_sync_every: e.get("target_sync_every", td.target_sync_every)?,
        update_every: e.get("update_every", td.update_every)?,
        hidden: e.list("hidden", td.hidden.clone())?,
        head: e.get::<HeadKind>("head", td.head)?,
        eval_every: e.get("eval_every", td.eval_every)?,
        eval_episodes: e.get("eval_episodes", td.eval_episodes)?,
        eq7_literal: e.get("eq7_literal", td.eq7_literal)?,
        seed: 0,
    };
    at("episodes", train.validate())?;

    let physical_k = e.get("physical_k", 0usize)?;
    let twin_noise = e.get("twin_noise", 0.9f64)?;
    at("physical_k", DeploymentPlan::new(m_uavs, physical_k, twin_noise).map(|_| ()))?;
    let names: Vec<String> = e.list("schemes", vec!["physical_only".to_string()])?;
    let schemes = names
        .iter()
        .map(|n| match n.as_str() {
            "physical_only" => Ok(Scheme::PhysicalOnly),
            "fixed_dt" => Ok(Scheme::FixedDt {
                physical: physical_k,
                delta: twin_noise,
            }),
            "tuned_dt" => Ok(Scheme::TunedDt),
            other => Err(e.err(e.line("schemes"), format!("unknown scheme {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;

    let sweep = match e.values.get("param") {
        None if e.values.contains_key("values") => {
            return Err(e.err(e.line("values"), "sweep values given without a sweep param"));
        }
        None => None,
        Some((raw, line)) if raw == "none" => {
            if e.values.contains_key("values") {
                return Err(e.err(*line, "sweep param is none but values are given"));
            }
            None
        }
        Some((raw, line)) => Some(Sweep {
            param: raw.parse().map_err(|err: Error| e.err(*line, err.to_string()))?,
            values: e.list("values", Vec::new())?,
        }),
    };

    let surface = SurfaceSpec {
        deltas: e.list("deltas", d.surface.deltas.clone())?,
        ks: e.list("ks", d.surface.ks.iter().copied().filter(|k| *k <= m_uavs).collect())?,
        seeds_per_cell: e.get("seeds_per_cell", d.surface.seeds_per_cell)?,
    };
    let tuner = TunerConfig {
        lr: e.get("lr_g", d.tuner.lr)?,
        steps: e.get("steps", d.tuner.steps)?,
        hidden: e.list("hidden_g", d.tuner.hidden.clone())?,
        seed: e.get("tuner_seed", d.tuner.seed)?,
    };
    let cfg = ExperimentConfig {
        env,
        train,
        econ,
        schemes,
        seeds: e.list("seeds", d.seeds.clone())?,
        sweep,
        surface,
        tuner,
    };
    // Remaining cross-field checks point at the most specific key available.
    let key = if e.values.contains_key("values") {
        "values"
    } else if e.values.contains_key("seeds") {
        "seeds"
    } else {
        "ks"
    };
    cfg.validate().map_err(|err| e.err(e.line(key), err.to_string()))?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// The fully resolved configuration in the input format; parsing it back
/// reproduces `cfg`.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let env = &cfg.env;
    let ch = &env.channel;
    let mv = &env.movement;
    let t = &cfg.train;
    let fixed = cfg.schemes.iter().find_map(|s| match s {
        Scheme::FixedDt { physical, delta } => Some((*physical, *delta)),
        _ => None,
    });
    let (physical_k, twin_noise) = fixed.unwrap_or((0, 0.9));
    let schemes: Vec<&str> = cfg.schemes.iter().map(Scheme::kind).collect();
    let _ = writeln!(s, "[env]");
    let _ = writeln!(s, "n_users = {}", env.n_users);
    let _ = writeln!(s, "m_uavs = {}", env.m_uavs);
    let _ = writeln!(s, "horizon = {}", env.horizon);
    let _ = writeln!(s, "reward_noise_mode = {}", env.noise_mode.as_str());
    let _ = writeln!(s, "eq8_literal = {}", env.eq8_literal);
    let _ = writeln!(s, "\n[channel]");
    let _ = writeln!(s, "bandwidth = {}", num(ch.bandwidth));
    let _ = writeln!(s, "pathloss_gain = {}", num(ch.pathloss_gain));
    let _ = writeln!(s, "ref_distance = {}", num(ch.ref_distance));
    let _ = writeln!(s, "pathloss_exponent = {}", num(ch.pathloss_exponent));
    let _ = writeln!(s, "tx_power = {}", num(ch.tx_power));
    let _ = writeln!(s, "noise_power = {}", num(ch.noise_power));
    let _ = writeln!(s, "\n[movement]");
    let _ = writeln!(s, "speed = {}", num(mv.speed));
    let _ = writeln!(s, "slot_dt = {}", num(mv.slot_dt));
    let _ = writeln!(s, "width = {}", num(mv.width));
    let _ = writeln!(s, "height = {}", num(mv.height));
    let _ = writeln!(s, "\n[economics]");
    let _ = writeln!(s, "alpha = {}", num(cfg.econ.alpha));
    let _ = writeln!(s, "beta = {}", num(cfg.econ.beta));
    let _ = writeln!(s, "zeta = {}", num(cfg.econ.zeta));
    let _ = writeln!(s, "eta = {}", num(cfg.econ.eta));
    let _ = writeln!(s, "\n[train]");
    let _ = writeln!(s, "episodes = {}", t.episodes);
    let _ = writeln!(s, "gamma = {}", num(t.gamma));
    let _ = writeln!(s, "lr_q = {}", num(t.lr_q));
    let _ = writeln!(s, "momentum = {}", num(t.momentum));
    let _ = writeln!(s, "batch = {}", t.batch);
    let _ = writeln!(s, "buffer_capacity = {}", t.buffer_capacity);
    let _ = writeln!(s, "eps_start = {}", num(t.eps_start));
    let _ = writeln!(s, "eps_end = {}", num(t.eps_end));
    let _ = writeln!(s, "eps_decay_fraction = {}", num(t.eps_decay_fraction));
    let _ = writeln!(s, "target_sync_every = {}", t.target_sync_every);
    let _ = writeln!(s, "update_every = {}", t.update_every);
    let _ = writeln!(s, "hidden = {}", join(&t.hidden));
    let _ = writeln!(s, "head = {}", t.head.as_str());
    let _ = writeln!(s, "eval_every = {}", t.eval_every);
    let _ = writeln!(s, "eval_episodes = {}", t.eval_episodes);
    let _ = writeln!(s, "eq7_literal = {}", t.eq7_literal);
    let _ = writeln!(s, "\n[scheme]");
    let _ = writeln!(s, "schemes = {}", schemes.join(", "));
    let _ = writeln!(s, "physical_k = {physical_k}");
    let _ = writeln!(s, "twin_noise = {}", num(twin_noise));
    let _ = writeln!(s, "\n[run]");
    let _ = writeln!(s, "seeds = {}", join(&cfg.seeds));
    let _ = writeln!(s, "\n[sweep]");
    match &cfg.sweep {
        Some(sw) => {
            let _ = writeln!(s, "param = {}", sw.param.as_str());
            let values: Vec<String> = sw.values.iter().map(|v| num(*v)).collect();
            let _ = writeln!(s, "values = {}", values.join(", "));
        }
        None => {
            let _ = writeln!(s, "param = none");
        }
    }
    let _ = writeln!(s, "\n[tuner]");
    let deltas: Vec<String> = cfg.surface.deltas.iter().map(|v| num(*v)).collect();
    let _ = writeln!(s, "deltas = {}", deltas.join(", "));
    let _ = writeln!(s, "ks = {}", join(&cfg.surface.ks));
    let _ = writeln!(s, "seeds_per_cell = {}", cfg.surface.seeds_per_cell);
    let _ = writeln!(s, "lr_g = {}", num(cfg.tuner.lr));
    let _ = writeln!(s, "steps = {}", cfg.tuner.steps);
    let _ = writeln!(s, "hidden_g = {}", join(&cfg.tuner.hidden));
    let _ = writeln!(s, "tuner_seed = {}", cfg.tuner.seed);
    s
}
