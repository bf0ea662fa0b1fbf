//! Scheme runners and sweeps over a shared cache of training runs.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use super::config::{ExperimentConfig, Scheme, SweepParam};
use super::report::{RowStatus, UtilityReport, UtilityRow};
use crate::dqn::{self, ConvergenceLog, TrainConfig, TrainOutcome};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::fleet::{self, DeploymentPlan, TwinEconomics};
use crate::neural::Network;
use crate::tuner::{self, PerformanceSurface};

/// A training run is identified by its plan and seed. All-physical plans
/// ignore the twin noise, so it is normalized away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct RunKey {
    physical: usize,
    delta_bits: u64,
    seed: u64,
}

impl RunKey {
    fn new(plan: &DeploymentPlan, seed: u64) -> Self {
        let delta = if plan.uses_twin() { plan.twin_noise } else { 0.0 };
        Self {
            physical: plan.physical,
            delta_bits: delta.to_bits(),
            seed,
        }
    }
}

/// One finished (or failed) training run.
#[derive(Debug)]
pub struct RunRecord {
    pub plan: DeploymentPlan,
    pub seed: u64,
    pub outcome: std::result::Result<TrainOutcome, String>,
    pub wall_secs: f64,
}

impl RunRecord {
    /// Final evaluated sum rate, or why there is none.
    pub fn rate(&self) -> std::result::Result<f64, String> {
        let outcome = self.outcome.as_ref().map_err(Clone::clone)?;
        if outcome.numeric_failures > 0 {
            return Err(format!("{} TD updates hit non-finite values", outcome.numeric_failures));
        }
        match outcome.final_rate {
            Some(r) if r.is_finite() => Ok(r),
            Some(r) => Err(format!("non-finite evaluated rate {r}")),
            None => Err("no evaluation recorded".into()),
        }
    }
}

/// Label of a concrete plan under a scheme, e.g. `fixed_dt/K=0/delta=0.9`.
pub fn scheme_id(scheme: &Scheme, plan: &DeploymentPlan) -> String {
    match scheme {
        Scheme::PhysicalOnly => "physical_only".into(),
        _ if !plan.uses_twin() => format!("{}/K={}", scheme.kind(), plan.physical),
        _ => format!("{}/K={}/delta={:?}", scheme.kind(), plan.physical, plan.twin_noise),
    }
}

/// Runs the schemes of one experiment, training each distinct
/// `(plan, seed)` once.
pub struct Runner {
    cfg: ExperimentConfig,
    cache: Arc<Mutex<HashMap<RunKey, Arc<RunRecord>>>>,
    surface: Arc<Mutex<Option<Arc<PerformanceSurface>>>>,
    selector: Mutex<Option<Arc<Network>>>,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            cache: Arc::new(Mutex::new(HashMap::new())),
            surface: Arc::new(Mutex::new(None)),
            selector: Mutex::new(None),
        })
    }

    /// A runner for `cfg` sharing this one's finished trainings and
    /// surface. Only the schemes, economics and sweep may differ.
    pub fn fork(&self, cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let same = cfg.env == self.cfg.env
            && cfg.train == self.cfg.train
            && cfg.surface == self.cfg.surface
            && cfg.seeds == self.cfg.seeds;
        if !same {
            return Err(Error::domain(
                "forked runners must share environment, training, surface and seed settings",
            ));
        }
        Ok(Self {
            cfg,
            cache: Arc::clone(&self.cache),
            surface: Arc::clone(&self.surface),
            selector: Mutex::new(None),
        })
    }

    /// Uses a precomputed surface instead of training one.
    pub fn with_surface(self, surface: PerformanceSurface) -> Result<Self> {
        if let Some(k) = surface.ks().iter().find(|k| **k > self.cfg.env.m_uavs) {
            return Err(Error::domain(format!(
                "surface K={k} exceeds m_uavs = {}",
                self.cfg.env.m_uavs
            )));
        }
        *self.surface.lock().unwrap() = Some(Arc::new(surface));
        Ok(self)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn env_for(&self, plan: DeploymentPlan) -> EnvConfig {
        EnvConfig {
            plan,
            ..self.cfg.env.clone()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.cfg.train.clone()
        }
    }

    /// Trains every uncached job (in parallel) and returns the records in
    /// job order.
    pub fn train_many(&self, jobs: &[(DeploymentPlan, u64)]) -> Vec<Arc<RunRecord>> {
        let mut todo: Vec<(RunKey, DeploymentPlan, u64)> = Vec::new();
        {
            let cache = self.cache.lock().unwrap();
            for &(plan, seed) in jobs {
                let key = RunKey::new(&plan, seed);
                if !cache.contains_key(&key) && !todo.iter().any(|(k, _, _)| *k == key) {
                    todo.push((key, plan, seed));
                }
            }
        }
        if !todo.is_empty() {
            info!("training {} runs", todo.len());
        }
        let done: Vec<(RunKey, RunRecord)> = todo
            .into_par_iter()
            .map(|(key, plan, seed)| {
                let start = Instant::now();
                let outcome = dqn::train(&self.env_for(plan), &self.train_config(seed)).map_err(|e| e.to_string());
                if let Err(e) = &outcome {
                    warn!("run K={} delta={} seed {seed} failed: {e}", plan.physical, plan.twin_noise);
                }
                let record = RunRecord {
                    plan,
                    seed,
                    outcome,
                    wall_secs: start.elapsed().as_secs_f64(),
                };
                (key, record)
            })
            .collect();
        let mut cache = self.cache.lock().unwrap();
        for (key, record) in done {
            cache.insert(key, Arc::new(record));
        }
        jobs.iter()
            .map(|(plan, seed)| Arc::clone(&cache[&RunKey::new(plan, *seed)]))
            .collect()
    }

    pub fn train_one(&self, plan: DeploymentPlan, seed: u64) -> Arc<RunRecord> {
        self.train_many(&[(plan, seed)]).remove(0)
    }

    /// The performance surface, trained on first use.
    pub fn surface(&self) -> Result<Arc<PerformanceSurface>> {
        if let Some(s) = self.surface.lock().unwrap().as_ref() {
            return Ok(Arc::clone(s));
        }
        let spec = &self.cfg.surface;
        let m = self.cfg.env.m_uavs;
        let seeds = self.cfg.surface_seeds();
        let mut jobs = Vec::new();
        for &k in &spec.ks {
            for &d in &spec.deltas {
                let plan = DeploymentPlan::new(m, k, d)?;
                jobs.extend(seeds.iter().map(|&s| (plan, s)));
            }
        }
        self.train_many(&jobs);
        let surface = tuner::build_surface_with(m, &spec.deltas, &spec.ks, &seeds, |plan, seed| {
            self.train_one(plan, seed).rate().map_err(Error::state)
        })?;
        let surface = Arc::new(surface);
        *self.surface.lock().unwrap() = Some(Arc::clone(&surface));
        Ok(surface)
    }

    /// The selector network, trained on first use over every economics
    /// point of the experiment.
    pub fn selector(&self) -> Result<Arc<Network>> {
        if let Some(g) = self.selector.lock().unwrap().as_ref() {
            return Ok(Arc::clone(g));
        }
        let surface = self.surface()?;
        let econs: Vec<TwinEconomics> = self.cfg.econ_points().into_iter().map(|(_, e)| e).collect();
        let g = Arc::new(tuner::train_tuner(&econs, &surface, self.cfg.env.m_uavs, &self.cfg.tuner)?);
        *self.selector.lock().unwrap() = Some(Arc::clone(&g));
        Ok(g)
    }

    /// The deployment plan `scheme` uses under `econ`. Tuned plans keep the
    /// twin noise inside the surface's delta range.
    pub fn plan_for(&self, scheme: &Scheme, econ: &TwinEconomics) -> Result<DeploymentPlan> {
        let m = self.cfg.env.m_uavs;
        match *scheme {
            Scheme::PhysicalOnly => Ok(DeploymentPlan::all_physical(m)),
            Scheme::FixedDt { physical, delta } => DeploymentPlan::new(m, physical, delta),
            Scheme::TunedDt => {
                let plan = tuner::select_plan(&*self.selector()?, econ, m)?;
                if !plan.uses_twin() {
                    return Ok(DeploymentPlan::all_physical(m));
                }
                let (lo, hi) = self.surface()?.delta_range();
                DeploymentPlan::new(m, plan.physical, plan.twin_noise.clamp(lo, hi))
            }
        }
    }

    fn row(
        &self,
        scheme: &Scheme,
        sweep: Option<(SweepParam, f64)>,
        econ: &TwinEconomics,
        plan: Option<DeploymentPlan>,
        seed: u64,
        record: Option<&RunRecord>,
        failure: Option<String>,
    ) -> UtilityRow {
        let mut row = UtilityRow {
            scheme: scheme.kind().to_string(),
            sweep_param: sweep.map(|(p, _)| p.as_str().to_string()),
            sweep_value: sweep.map(|(_, v)| v),
            seed,
            physical_k: plan.map(|p| p.physical),
            twin_noise: plan.filter(DeploymentPlan::uses_twin).map(|p| p.twin_noise),
            mean_sum_rate: None,
            construction_cost: None,
            deployment_cost: None,
            utility: None,
            status: RowStatus::Ok,
            wall_secs: record.map_or(0.0, |r| r.wall_secs),
        };
        let rate = match (failure, record) {
            (Some(msg), _) => Err(msg),
            (None, Some(r)) => r.rate(),
            (None, None) => Err("no training record".into()),
        };
        match (rate, plan) {
            (Ok(rate), Some(plan)) => {
                row.mean_sum_rate = Some(rate);
                row.construction_cost = Some(fleet::construction_cost(econ, &plan));
                row.deployment_cost = Some(fleet::deployment_cost(econ, &plan));
                row.utility = Some(fleet::utility(econ, &plan, rate));
            }
            (Err(msg), _) => row.status = RowStatus::Failed(msg),
            (Ok(_), None) => row.status = RowStatus::Failed("no deployment plan".into()),
        }
        row
    }

    /// One scheme at one economics point and seed.
    pub fn run_scheme(
        &self,
        scheme: &Scheme,
        sweep: Option<(SweepParam, f64)>,
        econ: &TwinEconomics,
        seed: u64,
    ) -> (Option<ConvergenceLog>, UtilityRow) {
        match self.plan_for(scheme, econ) {
            Ok(plan) => {
                let record = self.train_one(plan, seed);
                let log = record
                    .outcome
                    .as_ref()
                    .ok()
                    .map(|o| o.log.clone().with_scheme(&scheme_id(scheme, &plan)));
                (log, self.row(scheme, sweep, econ, Some(plan), seed, Some(&record), None))
            }
            Err(e) => (None, self.row(scheme, sweep, econ, None, seed, None, Some(e.to_string()))),
        }
    }

    /// Every economics point × scheme × seed of the configuration. Rows and
    /// logs come out in that order regardless of scheduling.
    pub fn sweep(&self) -> UtilityReport {
        let points = self.cfg.econ_points();
        let param = self.cfg.sweep.as_ref().map(|s| s.param);
        let mut cells = Vec::new();
        for (value, econ) in &points {
            for scheme in &self.cfg.schemes {
                let plan = self.plan_for(scheme, econ).map_err(|e| e.to_string());
                cells.push((value.map(|v| (param.unwrap(), v)), *econ, *scheme, plan));
            }
        }
        let jobs: Vec<(DeploymentPlan, u64)> = cells
            .iter()
            .filter_map(|c| c.3.as_ref().ok())
            .flat_map(|plan| self.cfg.seeds.iter().map(move |&s| (*plan, s)))
            .collect();
        self.train_many(&jobs);

        let mut report = UtilityReport::new(&self.cfg);
        for (sweep, econ, scheme, plan) in &cells {
            for &seed in &self.cfg.seeds {
                let row = match plan {
                    Ok(plan) => {
                        let record = self.train_one(*plan, seed);
                        if let Ok(o) = &record.outcome {
                            report.add_log(o.log.clone().with_scheme(&scheme_id(scheme, plan)));
                        }
                        self.row(scheme, *sweep, econ, Some(*plan), seed, Some(&record), None)
                    }
                    Err(msg) => self.row(scheme, *sweep, econ, None, seed, None, Some(msg.clone())),
                };
                report.rows.push(row);
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Sweep;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.env.n_users = 3;
        cfg.env.m_uavs = 2;
        cfg.env.horizon = 4;
        cfg.env.plan = DeploymentPlan::all_physical(2);
        cfg.train.episodes = 6;
        cfg.train.batch = 4;
        cfg.train.hidden = vec![8];
        cfg.train.eval_every = 2;
        cfg.train.eval_episodes = 1;
        cfg.seeds = vec![1, 2];
        cfg.surface.deltas = vec![0.0, 1.0];
        cfg.surface.ks = vec![0, 2];
        cfg.surface.seeds_per_cell = 1;
        cfg.tuner.steps = 5;
        cfg
    }

    #[test]
    fn physical_only_has_no_construction_cost() {
        let runner = Runner::new(tiny()).unwrap();
        let econ = runner.config().econ;
        let (log, row) = runner.run_scheme(&Scheme::PhysicalOnly, None, &econ, 1);
        assert_eq!(row.status, RowStatus::Ok);
        assert_eq!(row.construction_cost, Some(0.0));
        assert_eq!(row.twin_noise, None);
        assert_eq!(log.unwrap().rows[0].scheme_id, "physical_only");
    }

    #[test]
    fn reruns_are_identical() {
        let a = Runner::new(tiny()).unwrap();
        let b = Runner::new(tiny()).unwrap();
        let scheme = Scheme::FixedDt {
            physical: 0,
            delta: 0.9,
        };
        let econ = TwinEconomics::default();
        let (la, ra) = a.run_scheme(&scheme, None, &econ, 2);
        let (lb, rb) = b.run_scheme(&scheme, None, &econ, 2);
        assert_eq!(ra.mean_sum_rate, rb.mean_sum_rate);
        assert_eq!(ra.utility, rb.utility);
        assert_eq!(la, lb);
        assert_eq!(ra.twin_noise, Some(0.9));
    }

    #[test]
    fn single_value_sweep_matches_run_scheme() {
        let mut cfg = tiny();
        cfg.schemes = vec![Scheme::PhysicalOnly, Scheme::TunedDt];
        cfg.sweep = Some(Sweep {
            param: SweepParam::CostWeight,
            values: vec![2.0],
        });
        let runner = Runner::new(cfg.clone()).unwrap();
        let report = runner.sweep();
        assert_eq!(report.rows.len(), 4);
        let fresh = Runner::new(cfg).unwrap();
        let econ = SweepParam::CostWeight.apply(&fresh.config().econ, 2.0);
        let mut expected = Vec::new();
        for scheme in [Scheme::PhysicalOnly, Scheme::TunedDt] {
            for seed in [1, 2] {
                let (_, mut row) = fresh.run_scheme(&scheme, Some((SweepParam::CostWeight, 2.0)), &econ, seed);
                row.wall_secs = 0.0;
                expected.push(row);
            }
        }
        let got: Vec<UtilityRow> = report
            .rows
            .into_iter()
            .map(|mut r| {
                r.wall_secs = 0.0;
                r
            })
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn forks_share_trainings() {
        let base = Runner::new(tiny()).unwrap();
        base.train_one(DeploymentPlan::all_physical(2), 1);
        let mut cfg = tiny();
        cfg.econ.alpha = 99.0;
        let fork = base.fork(cfg).unwrap();
        assert_eq!(fork.cache.lock().unwrap().len(), 1);
        fork.train_one(DeploymentPlan::new(2, 0, 0.5).unwrap(), 2);
        assert_eq!(base.cache.lock().unwrap().len(), 2);
        let mut other = tiny();
        other.train.episodes = 7;
        assert!(base.fork(other).is_err());
    }

    #[test]
    fn training_is_shared_across_sweep_points() {
        let mut cfg = tiny();
        cfg.sweep = Some(Sweep {
            param: SweepParam::Alpha,
            values: vec![1.0, 5.0, 9.0],
        });
        let runner = Runner::new(cfg).unwrap();
        let report = runner.sweep();
        assert_eq!(report.rows.len(), 6);
        assert_eq!(runner.cache.lock().unwrap().len(), 2);
        // Alpha does not touch an all-physical fleet.
        assert_eq!(report.rows[0].utility, report.rows[2].utility);
    }
}
