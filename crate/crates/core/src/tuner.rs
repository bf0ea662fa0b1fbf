//! The cascade selector `G`: a small network mapping cost coefficients to a
//! deployment plan `(delta, K)`, trained by gradient ascent on the utility.
//!
//! The rate term of the utility depends on `(delta, K)` only through DQN
//! training, which has no analytic derivative. Its gradient comes from a
//! [`PerformanceSurface`]: trained-policy sum rates measured on a
//! `(delta, K)` grid, bilinearly interpolated and differentiated by finite
//! differences. `K` is relaxed to a continuous value in `[0, M]` during
//! training and rounded when a plan is deployed.

use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dqn::{self, TrainConfig};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::fleet::{DeploymentPlan, TwinEconomics};
use crate::neural::{Network, StepDirection};

/// Reference scale for the cost magnitudes `alpha` and `zeta`, which enter
/// `G` as `ln(1 + c / COST_SCALE)`.
pub const COST_SCALE: f64 = 10.0;

/// Default selector topology.
pub const TUNER_DIMS: [usize; 4] = [4, 32, 32, 2];

/// Aggregated evaluation of one `(delta, K)` grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceCell {
    pub mean_rate: f64,
    pub std_err: f64,
    pub seeds: usize,
}

impl SurfaceCell {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 || samples.iter().any(|v| !v.is_finite()) {
            return Self::invalid();
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean_rate: mean,
            std_err,
            seeds: n,
        }
    }

    pub fn invalid() -> Self {
        Self {
            mean_rate: f64::NAN,
            std_err: f64::NAN,
            seeds: 0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.seeds > 0 && self.mean_rate.is_finite()
    }
}

/// Empirical map `(delta, K) → evaluated sum rate` on a rectangular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceSurface {
    deltas: Vec<f64>,
    ks: Vec<usize>,
    /// Row-major `[k][delta]`.
    cells: Vec<SurfaceCell>,
}

pub const SURFACE_HEADER: [&str; 5] = ["delta", "k", "mean_rate", "std_err", "seeds"];

fn check_axis<T: PartialOrd + Copy>(values: &[T], name: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::domain(format!("{name} grid is empty")));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain(format!("{name} grid must be strictly ascending")));
    }
    Ok(())
}

impl PerformanceSurface {
    /// Cells are given row-major as `[k][delta]`.
    pub fn new(deltas: Vec<f64>, ks: Vec<usize>, cells: Vec<SurfaceCell>) -> Result<Self> {
        check_axis(&deltas, "delta")?;
        check_axis(&ks, "K")?;
        if deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::domain("surface delta values must be finite and >= 0"));
        }
        if cells.len() != deltas.len() * ks.len() {
            return Err(Error::domain(format!(
                "surface needs {} cells, got {}",
                deltas.len() * ks.len(),
                cells.len()
            )));
        }
        Ok(Self { deltas, ks, cells })
    }

    /// Builds a surface from a rate function of `(delta, K)`; handy for
    /// synthetic objectives.
    pub fn from_fn(deltas: Vec<f64>, ks: Vec<usize>, f: impl Fn(f64, usize) -> f64) -> Result<Self> {
        let cells = ks
            .iter()
            .flat_map(|&k| {
                deltas.iter().map(move |&d| (d, k))
            })
            .map(|(d, k)| SurfaceCell {
                mean_rate: f(d, k),
                std_err: 0.0,
                seeds: 1,
            })
            .collect();
        Self::new(deltas, ks, cells)
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn ks(&self) -> &[usize] {
        &self.ks
    }

    pub fn cell(&self, delta_index: usize, k_index: usize) -> &SurfaceCell {
        &self.cells[k_index * self.deltas.len() + delta_index]
    }

    /// `(delta, k, cell)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (f64, usize, &SurfaceCell)> {
        self.ks
            .iter()
            .flat_map(move |&k| self.deltas.iter().map(move |&d| (d, k)))
            .zip(&self.cells)
            .map(|((d, k), c)| (d, k, c))
    }

    pub fn delta_range(&self) -> (f64, f64) {
        (self.deltas[0], self.deltas[self.deltas.len() - 1])
    }

    pub fn k_range(&self) -> (f64, f64) {
        (self.ks[0] as f64, self.ks[self.ks.len() - 1] as f64)
    }

    pub fn contains(&self, delta: f64, k: f64) -> bool {
        let (d0, d1) = self.delta_range();
        let (k0, k1) = self.k_range();
        (d0..=d1).contains(&delta) && (k0..=k1).contains(&k)
    }

    /// Clamps a query into the grid hull.
    pub fn project(&self, delta: f64, k: f64) -> (f64, f64) {
        let (d0, d1) = self.delta_range();
        let (k0, k1) = self.k_range();
        (delta.clamp(d0, d1), k.clamp(k0, k1))
    }

    /// Bilinear interpolation of the cell means.
    pub fn interpolate(&self, delta: f64, k: f64) -> Result<f64> {
        if !self.contains(delta, k) {
            return Err(Error::domain(format!(
                "query (delta={delta}, K={k}) lies outside the surface hull"
            )));
        }
        let (di, t) = bracket(&self.deltas, delta);
        let kf: Vec<f64> = self.ks.iter().map(|&k| k as f64).collect();
        let (ki, u) = bracket(&kf, k);
        let di1 = (di + 1).min(self.deltas.len() - 1);
        let ki1 = (ki + 1).min(self.ks.len() - 1);
        let mut rows = [0.0; 2];
        for (row, kk, w) in [(0, ki, 1.0 - u), (1, ki1, u)] {
            if w != 0.0 {
                rows[row] = lerp(self.valid_mean(di, kk, 1.0 - t)?, self.valid_mean(di1, kk, t)?, t);
            }
        }
        let value = lerp(rows[0], rows[1], u);
        Ok(value)
    }

    /// Mean of a cell that carries interpolation weight `w`; zero-weight
    /// cells are not read.
    fn valid_mean(&self, di: usize, ki: usize, w: f64) -> Result<f64> {
        if w == 0.0 {
            return Ok(0.0);
        }
        let c = self.cell(di, ki);
        if !c.is_valid() {
            return Err(Error::state(format!(
                "surface cell (delta={}, K={}) is invalid",
                self.deltas[di], self.ks[ki]
            )));
        }
        Ok(c.mean_rate)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for (delta, k, c) in self.iter() {
            w.serialize(SurfaceRecord {
                delta,
                k,
                mean_rate: c.mean_rate,
                std_err: c.std_err,
                seeds: c.seeds,
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header != SURFACE_HEADER {
            return Err(parse_err(1, format!("expected header {SURFACE_HEADER:?}, got {header:?}")));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.deserialize::<SurfaceRecord>().enumerate() {
            let rec = rec.map_err(|e| parse_err(i + 2, e.to_string()))?;
            let cell = SurfaceCell {
                mean_rate: rec.mean_rate,
                std_err: rec.std_err,
                seeds: rec.seeds,
            };
            rows.push((rec.delta, rec.k, cell));
        }
        let mut deltas: Vec<f64> = rows.iter().map(|r| r.0).collect();
        deltas.sort_by(f64::total_cmp);
        deltas.dedup();
        let mut ks: Vec<usize> = rows.iter().map(|r| r.1).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut cells = vec![None; deltas.len() * ks.len()];
        for (d, k, c) in rows {
            let di = deltas.iter().position(|x| *x == d).unwrap();
            let ki = ks.iter().position(|x| *x == k).unwrap();
            if cells[ki * deltas.len() + di].replace(c).is_some() {
                return Err(parse_err(0, format!("duplicate surface cell (delta={d}, K={k})")));
            }
        }
        let cells = cells
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| parse_err(0, "surface grid is not rectangular".into()))?;
        Self::new(deltas, ks, cells)
    }
}

/// One CSV row of a persisted surface.
#[derive(Debug, Serialize, Deserialize)]
struct SurfaceRecord {
    delta: f64,
    k: usize,
    mean_rate: f64,
    std_err: f64,
    seeds: usize,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + t * (b - a)
    }
}

/// Index of the grid interval holding `x` and the fractional position in it.
fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    if grid.len() == 1 {
        return (0, 0.0);
    }
    let i = grid[..grid.len() - 1]
        .iter()
        .rposition(|g| *g <= x)
        .unwrap_or(0);
    let t = ((x - grid[i]) / (grid[i + 1] - grid[i])).clamp(0.0, 1.0);
    (i, t)
}

/// Relative finite-difference step on each grid axis.
const SURFACE_FD_STEP: f64 = 1e-5;

/// `(dR/ddelta, dR/dK)` of the interpolated surface by central differences,
/// one-sided at the hull boundary. A single-valued axis has zero slope.
pub fn surface_gradient(surf: &PerformanceSurface, delta: f64, k: f64) -> Result<(f64, f64)> {
    if !surf.contains(delta, k) {
        return Err(Error::domain(format!(
            "query (delta={delta}, K={k}) lies outside the surface hull"
        )));
    }
    let (d0, d1) = surf.delta_range();
    let (k0, k1) = surf.k_range();
    let along = |lo: f64, hi: f64, x: f64, f: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
        if hi == lo {
            return Ok(0.0);
        }
        let h = SURFACE_FD_STEP * (hi - lo);
        let (a, b) = ((x - h).max(lo), (x + h).min(hi));
        Ok((f(b)? - f(a)?) / (b - a))
    };
    let dd = along(d0, d1, delta, &|x| surf.interpolate(x, k))?;
    let dk = along(k0, k1, k, &|x| surf.interpolate(delta, x))?;
    Ok((dd, dk))
}

/// Trains one DQN per `(delta, K, seed)` and records the physical evaluation.
///
/// Seeds are `tcfg.seed .. tcfg.seed + seeds_per_cell`, shared by every cell
/// so cells differ only in their deployment plan. All-physical cells
/// (`K = M`) ignore `delta` and are trained once per seed.
pub fn build_surface(
    env_cfg: &EnvConfig,
    tcfg: &TrainConfig,
    deltas: &[f64],
    ks: &[usize],
    seeds_per_cell: usize,
) -> Result<PerformanceSurface> {
    if seeds_per_cell == 0 {
        return Err(Error::domain("seeds_per_cell must be >= 1"));
    }
    let seeds: Vec<u64> = (0..seeds_per_cell as u64).map(|s| tcfg.seed + s).collect();
    build_surface_with(env_cfg.m_uavs, deltas, ks, &seeds, |plan, seed| {
        let env = EnvConfig {
            plan,
            ..env_cfg.clone()
        };
        let t = TrainConfig {
            seed,
            ..tcfg.clone()
        };
        dqn::train(&env, &t)?
            .final_rate
            .ok_or_else(|| Error::state("training produced no evaluation"))
    })
}

/// [`build_surface`] over an arbitrary `(plan, seed) → rate` evaluator.
pub fn build_surface_with<F>(
    m_uavs: usize,
    deltas: &[f64],
    ks: &[usize],
    seeds: &[u64],
    evaluate: F,
) -> Result<PerformanceSurface>
where
    F: Fn(DeploymentPlan, u64) -> Result<f64> + Sync,
{
    check_axis(deltas, "delta")?;
    check_axis(ks, "K")?;
    if seeds.is_empty() {
        return Err(Error::domain("every surface cell needs at least one seed"));
    }
    if let Some(k) = ks.iter().find(|k| **k > m_uavs) {
        return Err(Error::domain(format!("surface K={k} exceeds fleet size {m_uavs}")));
    }
    // Distinct runs: K = M collapses to a single noiseless plan.
    let mut jobs: Vec<(usize, u64, u64)> = Vec::new();
    for &k in ks {
        for &d in deltas {
            let d_key = if k == m_uavs { 0.0 } else { d };
            for &s in seeds {
                let job = (k, d_key.to_bits(), s);
                if !jobs.contains(&job) {
                    jobs.push(job);
                }
            }
        }
    }
    let results: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(k, d_bits, seed)| {
            let plan = DeploymentPlan::new(m_uavs, k, f64::from_bits(d_bits)).ok()?;
            match evaluate(plan, seed) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(v) => {
                    warn!("cell K={k} delta={} seed {seed}: non-finite rate {v}", f64::from_bits(d_bits));
                    None
                }
                Err(e) => {
                    warn!("cell K={k} delta={} seed {seed} failed: {e}", f64::from_bits(d_bits));
                    None
                }
            }
        })
        .collect();
    let lookup = |k: usize, d: f64, s: u64| {
        let d_key = if k == m_uavs { 0.0 } else { d };
        let idx = jobs.iter().position(|j| *j == (k, d_key.to_bits(), s)).unwrap();
        results[idx]
    };
    let mut cells = Vec::with_capacity(deltas.len() * ks.len());
    for &k in ks {
        for &d in deltas {
            let samples: Option<Vec<f64>> = seeds.iter().map(|&s| lookup(k, d, s)).collect();
            cells.push(match samples {
                Some(v) => SurfaceCell::from_samples(&v),
                None => SurfaceCell::invalid(),
            });
        }
    }
    PerformanceSurface::new(deltas.to_vec(), ks.to_vec(), cells)
}

/// Output of the selector network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunerOutput {
    pub delta: f64,
    pub k_continuous: f64,
    pub k_quantized: usize,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps raw selector outputs `(x, y)` onto a plan: `delta = ln(1 + e^x)`,
/// `k = M · logistic(y)`, rounded half-up for deployment.
pub fn output_map(raw_delta: f64, raw_k: f64, m_uavs: usize) -> TunerOutput {
    let delta = softplus(raw_delta);
    let k_continuous = m_uavs as f64 * logistic(raw_k);
    let k_quantized = ((k_continuous + 0.5).floor() as usize).min(m_uavs);
    TunerOutput {
        delta,
        k_continuous,
        k_quantized,
    }
}

pub fn tuner_features(econ: &TwinEconomics) -> [f64; 4] {
    [
        (econ.alpha / COST_SCALE).ln_1p(),
        econ.beta,
        (econ.zeta / COST_SCALE).ln_1p(),
        econ.eta,
    ]
}

fn check_tuner(g: &Network) -> Result<()> {
    if g.input_dim() != 4 || g.output_dim() != 2 {
        return Err(Error::domain(format!(
            "selector network must map 4 inputs to 2 outputs, got {:?}",
            g.layer_dims()
        )));
    }
    Ok(())
}

pub fn tuner_forward(g: &Network, econ: &TwinEconomics, m_uavs: usize) -> Result<TunerOutput> {
    check_tuner(g)?;
    let raw = g.forward(&tuner_features(econ))?;
    Ok(output_map(raw[0], raw[1], m_uavs))
}

/// Gradient of the utility with respect to `(delta, K)`:
/// `(eta·dR/ddelta − alpha·beta·e^{beta·delta}, eta·dR/dK − zeta)`.
pub fn utility_gradient(econ: &TwinEconomics, rate_grad: (f64, f64), delta: f64) -> (f64, f64) {
    (
        econ.eta * rate_grad.0 - econ.alpha * econ.beta * (econ.beta * delta).exp(),
        econ.eta * rate_grad.1 - econ.zeta,
    )
}

/// What one [`tuner_update`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunerStep {
    pub output: TunerOutput,
    /// The query was clamped into the surface hull.
    pub projected: bool,
    /// Utility gradient with respect to `(delta, K)` after projection.
    pub objective_grad: (f64, f64),
}

/// One gradient-ascent step of the selector on the utility.
///
/// The query is clamped into the surface hull. Gradient components that
/// would push an already out-of-hull output further out are zeroed. The
/// `(delta, K)` gradient is rescaled to unit max-norm before the chain
/// rule, so `lr_g` sets the step length independently of the utility's
/// units.
pub fn tuner_update(
    g: &mut Network,
    econ: &TwinEconomics,
    surf: &PerformanceSurface,
    lr_g: f64,
    m_uavs: usize,
) -> Result<TunerStep> {
    check_tuner(g)?;
    let features = tuner_features(econ);
    let trace = g.forward_trace(&features)?;
    let (raw_d, raw_k) = (trace.output()[0], trace.output()[1]);
    let output = output_map(raw_d, raw_k, m_uavs);
    let (qd, qk) = surf.project(output.delta, output.k_continuous);
    let projected = (qd, qk) != (output.delta, output.k_continuous);
    if projected {
        debug!(
            "selector query (delta={}, K={}) projected to ({qd}, {qk})",
            output.delta, output.k_continuous
        );
    }
    let rate_grad = surface_gradient(surf, qd, qk)?;
    let (mut gd, mut gk) = utility_gradient(econ, rate_grad, output.delta);
    let (d0, d1) = surf.delta_range();
    let (k0, k1) = surf.k_range();
    if (output.delta >= d1 && gd > 0.0) || (output.delta <= d0 && gd < 0.0) {
        gd = 0.0;
    }
    if (output.k_continuous >= k1 && gk > 0.0) || (output.k_continuous <= k0 && gk < 0.0) {
        gk = 0.0;
    }
    if !(gd.is_finite() && gk.is_finite()) {
        return Err(Error::numeric("non-finite selector objective gradient"));
    }
    let step = TunerStep {
        output,
        projected,
        objective_grad: (gd, gk),
    };
    let norm = gd.abs().max(gk.abs());
    if norm == 0.0 {
        return Ok(step);
    }
    // Chain rule through the output maps: softplus' = logistic,
    // d(M·logistic(y))/dy = M·s·(1 − s).
    let s = logistic(raw_k);
    let out_grad = [
        gd / norm * logistic(raw_d),
        gk / norm * m_uavs as f64 * s * (1.0 - s),
    ];
    let grads = {
        let mut grads = crate::neural::GradientSet::zeros_like(g);
        g.accumulate_gradients(&trace, &out_grad, &mut grads)?;
        grads
    };
    g.param_step(&grads, lr_g, StepDirection::Ascend)?;
    Ok(step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunerConfig {
    pub lr: f64,
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 500,
            hidden: vec![32, 32],
            seed: 0,
        }
    }
}

impl TunerConfig {
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![4];
        dims.extend(&self.hidden);
        dims.push(2);
        dims
    }
}

/// Fresh selector trained for `cfg.steps` rounds, each round visiting every
/// economics point in `econs` once.
pub fn train_tuner(
    econs: &[TwinEconomics],
    surf: &PerformanceSurface,
    m_uavs: usize,
    cfg: &TunerConfig,
) -> Result<Network> {
    if econs.is_empty() {
        return Err(Error::domain("selector training needs at least one economics point"));
    }
    let mut g = Network::new(&cfg.dims(), cfg.seed)?;
    let mut projections = 0usize;
    for _ in 0..cfg.steps {
        for econ in econs {
            if tuner_update(&mut g, econ, surf, cfg.lr, m_uavs)?.projected {
                projections += 1;
            }
        }
    }
    if projections > 0 {
        debug!("selector training projected {projections} queries into the surface hull");
    }
    Ok(g)
}

/// The plan `G` selects for `econ`.
pub fn select_plan(g: &Network, econ: &TwinEconomics, m_uavs: usize) -> Result<DeploymentPlan> {
    let out = tuner_forward(g, econ, m_uavs)?;
    DeploymentPlan::new(m_uavs, out.k_quantized, out.delta)
}
