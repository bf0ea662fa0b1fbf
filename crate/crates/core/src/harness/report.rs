//! Utility reports: CSV output, charts, run manifest and the
//! self-consistency audit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::chart::{line_chart, Series};
use super::config::{render_config, ExperimentConfig, SweepParam};
use crate::dqn::{fmt_f64, ConvergenceLog, LogRow, CONVERGENCE_HEADER};
use crate::error::{Error, Result};
use crate::fleet::{self, DeploymentPlan, TwinEconomics};

pub const UTILITY_HEADER: [&str; 11] = [
    "scheme",
    "sweep_param",
    "sweep_value",
    "seed",
    "mean_sum_rate",
    "construction_cost",
    "deployment_cost",
    "utility",
    "status",
    "k",
    "delta",
];

const NA: &str = "n/a";

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

impl RowStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RowStatus::Ok)
    }

    fn render(&self) -> String {
        match self {
            RowStatus::Ok => "ok".into(),
            RowStatus::Failed(msg) => format!("failed: {msg}"),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(RowStatus::Ok),
            _ => s.strip_prefix("failed: ").map(|m| RowStatus::Failed(m.to_string())),
        }
    }
}

/// One `(scheme, sweep value, seed)` outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityRow {
    pub scheme: String,
    pub sweep_param: Option<String>,
    pub sweep_value: Option<f64>,
    pub seed: u64,
    pub physical_k: Option<usize>,
    /// `None` whenever no twin is built.
    pub twin_noise: Option<f64>,
    pub mean_sum_rate: Option<f64>,
    pub construction_cost: Option<f64>,
    pub deployment_cost: Option<f64>,
    pub utility: Option<f64>,
    pub status: RowStatus,
    /// Training wall time; recorded in the manifest, not the CSV.
    pub wall_secs: f64,
}

impl UtilityRow {
    fn record(&self) -> [String; 11] {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        [
            self.scheme.clone(),
            self.sweep_param.clone().unwrap_or_else(|| "none".into()),
            self.sweep_value.map(fmt_f64).unwrap_or_else(|| NA.into()),
            self.seed.to_string(),
            opt(self.mean_sum_rate),
            opt(self.construction_cost),
            opt(self.deployment_cost),
            opt(self.utility),
            self.status.render(),
            self.physical_k.map(|k| k.to_string()).unwrap_or_else(|| NA.into()),
            self.twin_noise.map(fmt_f64).unwrap_or_else(|| NA.into()),
        ]
    }
}

/// Rows and convergence logs of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityReport {
    pub config: ExperimentConfig,
    pub rows: Vec<UtilityRow>,
    /// One log per distinct `(scheme_id, seed)`, in first-seen order.
    pub logs: Vec<ConvergenceLog>,
}

fn log_key(log: &ConvergenceLog) -> Option<(&str, u64)> {
    log.rows.first().map(|r| (r.scheme_id.as_str(), r.seed))
}

impl UtilityReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            config: config.clone(),
            rows: Vec::new(),
            logs: Vec::new(),
        }
    }

    pub fn add_log(&mut self, log: ConvergenceLog) {
        let Some(key) = log_key(&log) else { return };
        if !self.logs.iter().any(|l| log_key(l) == Some(key)) {
            self.logs.push(log);
        }
    }

    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.status.is_ok())
    }

    /// Seed-averaged utility and its standard error per `(scheme, sweep
    /// value)`, over successful rows.
    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scheme: String,
    pub sweep_value: Option<f64>,
    pub mean_rate: f64,
    pub mean_utility: f64,
    pub std_err: f64,
    pub seeds: usize,
}

pub fn summarize(rows: &[UtilityRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, Option<u64>), Vec<&UtilityRow>)> = Vec::new();
    for r in rows.iter().filter(|r| r.status.is_ok()) {
        let key = (r.scheme.clone(), r.sweep_value.map(f64::to_bits));
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((scheme, value), g)| {
            let u: Vec<f64> = g.iter().filter_map(|r| r.utility).collect();
            let rates: Vec<f64> = g.iter().filter_map(|r| r.mean_sum_rate).collect();
            let n = u.len() as f64;
            let mean = u.iter().sum::<f64>() / n;
            let std_err = if u.len() > 1 {
                (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                scheme,
                sweep_value: value.map(f64::from_bits),
                mean_rate: rates.iter().sum::<f64>() / rates.len() as f64,
                mean_utility: mean,
                std_err,
                seeds: u.len(),
            }
        })
        .collect()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_utility_csv(rows: &[UtilityRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(UTILITY_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_utility_csv(path: &Path) -> Result<Vec<UtilityRow>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    if header != UTILITY_HEADER {
        return Err(parse_err(1, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        let f = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> Result<Option<f64>> {
            match f(j) {
                "" | NA => Ok(None),
                s => s
                    .parse()
                    .map(Some)
                    .map_err(|e| parse_err(line, format!("{}: {e}", UTILITY_HEADER[j]))),
            }
        };
        rows.push(UtilityRow {
            scheme: f(0).to_string(),
            sweep_param: (f(1) != "none").then(|| f(1).to_string()),
            sweep_value: num(2)?,
            seed: f(3).parse().map_err(|e| parse_err(line, format!("seed: {e}")))?,
            mean_sum_rate: num(4)?,
            construction_cost: num(5)?,
            deployment_cost: num(6)?,
            utility: num(7)?,
            status: RowStatus::parse(f(8)).ok_or_else(|| parse_err(line, format!("bad status {:?}", f(8))))?,
            physical_k: match f(9) {
                NA => None,
                s => Some(s.parse().map_err(|e| parse_err(line, format!("k: {e}")))?),
            },
            twin_noise: num(10)?,
            wall_secs: 0.0,
        });
    }
    Ok(rows)
}

pub fn load_convergence_csv(path: &Path) -> Result<ConvergenceLog> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_string).collect();
    if header != CONVERGENCE_HEADER {
        return Err(parse_err(1, format!("unexpected header {header:?}")));
    }
    let mut log = ConvergenceLog::default();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        let f = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> Result<f64> {
            f(j).parse()
                .map_err(|e| parse_err(line, format!("{}: {e}", CONVERGENCE_HEADER[j])))
        };
        let opt = |j: usize| -> Result<Option<f64>> {
            if f(j).is_empty() {
                Ok(None)
            } else {
                num(j).map(Some)
            }
        };
        log.rows.push(LogRow {
            episode: f(0).parse().map_err(|e| parse_err(line, format!("episode: {e}")))?,
            train_return: num(1)?,
            eval_sum_rate: opt(2)?,
            moving_avg: opt(3)?,
            epsilon: num(4)?,
            seed: f(5).parse().map_err(|e| parse_err(line, format!("seed: {e}")))?,
            scheme_id: f(6).to_string(),
        });
    }
    Ok(log)
}

/// Recomputes costs and utility of every successful row from its rate,
/// plan and economics, demanding exact agreement.
pub fn audit(rows: &[UtilityRow], cfg: &ExperimentConfig) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        let line = i + 2;
        if r.scheme == "physical_only" && r.twin_noise.is_some() {
            return Err(Error::state(format!("row {line}: physical_only row carries a delta value")));
        }
        if !r.status.is_ok() {
            continue;
        }
        let econ = row_economics(r, cfg).map_err(|e| Error::state(format!("row {line}: {e}")))?;
        let (Some(k), Some(rate)) = (r.physical_k, r.mean_sum_rate) else {
            return Err(Error::state(format!("row {line}: successful row lacks plan or rate")));
        };
        let m = cfg.env.m_uavs;
        let plan = match r.twin_noise {
            Some(d) => DeploymentPlan::new(m, k, d)?,
            None if k == m => DeploymentPlan::all_physical(m),
            None => return Err(Error::state(format!("row {line}: twin plan without delta"))),
        };
        let expect = (
            fleet::construction_cost(&econ, &plan),
            fleet::deployment_cost(&econ, &plan),
            fleet::utility(&econ, &plan, rate),
        );
        if (r.construction_cost, r.deployment_cost, r.utility) != (Some(expect.0), Some(expect.1), Some(expect.2)) {
            return Err(Error::state(format!(
                "row {line}: utility columns {:?} disagree with recomputation {expect:?}",
                (r.construction_cost, r.deployment_cost, r.utility)
            )));
        }
    }
    Ok(())
}

fn row_economics(r: &UtilityRow, cfg: &ExperimentConfig) -> Result<TwinEconomics> {
    match (&r.sweep_param, r.sweep_value) {
        (None, None) => Ok(cfg.econ),
        (Some(p), Some(v)) => Ok(p.parse::<SweepParam>()?.apply(&cfg.econ, v)),
        _ => Err(Error::state("sweep parameter and value must appear together")),
    }
}

/// Mean moving average per scheme and episode, averaged over seeds.
fn convergence_series(rows: &[LogRow]) -> Vec<Series> {
    let mut by_scheme: Vec<(String, BTreeMap<usize, (f64, usize)>)> = Vec::new();
    for r in rows {
        let Some(v) = r.moving_avg else { continue };
        let idx = match by_scheme.iter().position(|(s, _)| *s == r.scheme_id) {
            Some(i) => i,
            None => {
                by_scheme.push((r.scheme_id.clone(), BTreeMap::new()));
                by_scheme.len() - 1
            }
        };
        let e = by_scheme[idx].1.entry(r.episode).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    by_scheme
        .into_iter()
        .map(|(label, m)| Series {
            label,
            points: m.into_iter().map(|(ep, (s, n))| (ep as f64, s / n as f64)).collect(),
        })
        .collect()
}

fn utility_series(rows: &[UtilityRow]) -> Vec<Series> {
    let mut series: Vec<Series> = Vec::new();
    for s in summarize(rows) {
        let x = s.sweep_value.unwrap_or(0.0);
        match series.iter_mut().find(|x| x.label == s.scheme) {
            Some(existing) => existing.points.push((x, s.mean_utility)),
            None => series.push(Series {
                label: s.scheme,
                points: vec![(x, s.mean_utility)],
            }),
        }
    }
    series
}

/// Renders the charts for rows and logs into `out_dir`; returns the paths
/// written.
pub fn render_charts(rows: &[UtilityRow], logs: &[LogRow], sweep_label: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let charts = [
        (
            "convergence.svg",
            line_chart(
                "Moving-average evaluated sum rate",
                "episode",
                "sum rate (bit/s/Hz)",
                &convergence_series(logs),
            ),
        ),
        (
            "utility.svg",
            line_chart("Network utility", sweep_label, "utility", &utility_series(rows)),
        ),
    ];
    for (name, svg) in charts {
        if let Some(svg) = svg {
            let path = out_dir.join(name);
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn manifest(report: &UtilityReport) -> String {
    let cfg = &report.config;
    let mut s = String::new();
    let _ = writeln!(s, "twinforge {}", env!("CARGO_PKG_VERSION"));
    let seeds: Vec<String> = cfg.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds: {}", seeds.join(", "));
    let surface: Vec<String> = cfg.surface_seeds().iter().map(u64::to_string).collect();
    let _ = writeln!(s, "surface seeds: {}", surface.join(", "));
    let _ = writeln!(s, "rows: {} ({} failed)", report.rows.len(), report.rows.iter().filter(|r| !r.status.is_ok()).count());
    let total: f64 = report.rows.iter().map(|r| r.wall_secs).sum();
    let _ = writeln!(s, "training wall time (s, summed over rows): {total:.3}");
    let _ = writeln!(s, "\n# per-row wall time (s)");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{} {}={} seed {}: {:.3}",
            r.scheme,
            r.sweep_param.as_deref().unwrap_or("none"),
            r.sweep_value.map(fmt_f64).unwrap_or_else(|| NA.into()),
            r.seed,
            r.wall_secs
        );
    }
    let _ = writeln!(s, "\n# resolved configuration\n");
    s.push_str(&render_config(cfg));
    s
}

/// Writes `utility.csv`, `convergence.csv`, `config.cfg`, `manifest.txt`
/// and the charts into `out_dir`, then audits the written utility table.
pub fn emit_report(report: &UtilityReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let utility = out_dir.join("utility.csv");
    write_utility_csv(&report.rows, &utility)?;
    let convergence = out_dir.join("convergence.csv");
    let mut all = ConvergenceLog::default();
    for log in &report.logs {
        all.rows.extend(log.rows.iter().cloned());
    }
    all.save(&convergence)?;
    let config = out_dir.join("config.cfg");
    std::fs::write(&config, render_config(&report.config)).map_err(|e| Error::io(&config, e))?;
    let manifest_path = out_dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest(report)).map_err(|e| Error::io(&manifest_path, e))?;

    let mut written = vec![utility.clone(), convergence, config, manifest_path];
    let label = report.config.sweep.as_ref().map_or("economics point", |s| s.param.as_str());
    written.extend(render_charts(&report.rows, &all.rows, label, out_dir)?);
    audit(&load_utility_csv(&utility)?, &report.config)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scheme: &str, value: f64, seed: u64, k: usize, delta: Option<f64>, rate: f64) -> UtilityRow {
        let cfg = ExperimentConfig::default();
        let econ = SweepParam::CostWeight.apply(&cfg.econ, value);
        let plan = match delta {
            Some(d) => DeploymentPlan::new(4, k, d).unwrap(),
            None => DeploymentPlan::all_physical(4),
        };
        UtilityRow {
            scheme: scheme.into(),
            sweep_param: Some("cost_weight".into()),
            sweep_value: Some(value),
            seed,
            physical_k: Some(k),
            twin_noise: delta,
            mean_sum_rate: Some(rate),
            construction_cost: Some(fleet::construction_cost(&econ, &plan)),
            deployment_cost: Some(fleet::deployment_cost(&econ, &plan)),
            utility: Some(fleet::utility(&econ, &plan, rate)),
            status: RowStatus::Ok,
            wall_secs: 1.5,
        }
    }

    fn report() -> UtilityReport {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep = Some(super::super::config::Sweep {
            param: SweepParam::CostWeight,
            values: vec![0.5, 2.0],
        });
        let mut r = UtilityReport::new(&cfg);
        r.rows = vec![
            row("physical_only", 0.5, 0, 4, None, 812.25),
            row("fixed_dt", 0.5, 0, 0, Some(0.9), 790.1),
            row("physical_only", 2.0, 0, 4, None, 812.25),
            row("fixed_dt", 2.0, 0, 0, Some(0.9), 790.1),
        ];
        let mut failed = row("tuned_dt", 2.0, 0, 1, Some(0.3), 0.0);
        failed.mean_sum_rate = None;
        failed.utility = None;
        failed.construction_cost = None;
        failed.deployment_cost = None;
        failed.status = RowStatus::Failed("diverged, twice".into());
        r.rows.push(failed);
        r.add_log(ConvergenceLog {
            rows: vec![LogRow {
                episode: 0,
                train_return: 1.0,
                eval_sum_rate: Some(2.0),
                moving_avg: Some(2.0),
                epsilon: 1.0,
                seed: 0,
                scheme_id: "physical_only".into(),
            }],
        });
        r
    }

    #[test]
    fn empty_report_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let written = emit_report(&UtilityReport::new(&ExperimentConfig::default()), dir.path()).unwrap();
        let utility = std::fs::read_to_string(dir.path().join("utility.csv")).unwrap();
        assert_eq!(utility.lines().count(), 1);
        let convergence = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
        assert_eq!(convergence.trim(), CONVERGENCE_HEADER.join(","));
        assert!(!written.iter().any(|p| p.extension().is_some_and(|e| e == "svg")));
    }

    #[test]
    fn csv_round_trip_passes_audit() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        let written = emit_report(&r, dir.path()).unwrap();
        assert!(written.iter().any(|p| p.ends_with("utility.svg")));
        let reloaded = load_utility_csv(&dir.path().join("utility.csv")).unwrap();
        let expected: Vec<UtilityRow> = r
            .rows
            .iter()
            .cloned()
            .map(|mut x| {
                x.wall_secs = 0.0;
                x
            })
            .collect();
        assert_eq!(reloaded, expected);
        let text = std::fs::read_to_string(dir.path().join("utility.csv")).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",ok,4,n/a"));
        let log = load_convergence_csv(&dir.path().join("convergence.csv")).unwrap();
        assert_eq!(log, r.logs[0]);
    }

    #[test]
    fn audit_catches_tampering() {
        let mut r = report();
        r.rows[1].utility = r.rows[1].utility.map(|u| u + 1e-9);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(&r, dir.path()), Err(Error::State(_))));
        let mut r = report();
        r.rows[0].twin_noise = Some(0.5);
        assert!(audit(&r.rows, &r.config).is_err());
    }

    #[test]
    fn emission_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        emit_report(&report(), a.path()).unwrap();
        emit_report(&report(), b.path()).unwrap();
        for f in ["utility.csv", "convergence.csv", "utility.svg", "convergence.svg", "config.cfg"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn summary_averages_successful_rows() {
        let mut rows = vec![
            row("fixed_dt", 1.0, 0, 0, Some(0.9), 800.0),
            row("fixed_dt", 1.0, 1, 0, Some(0.9), 820.0),
        ];
        rows.push(UtilityRow {
            status: RowStatus::Failed("x".into()),
            ..row("fixed_dt", 1.0, 2, 0, Some(0.9), 5000.0)
        });
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].seeds, 2);
        assert!((s[0].mean_rate - 810.0).abs() < 1e-9);
        assert!((s[0].std_err - 10.0).abs() < 1e-9);
    }
}
