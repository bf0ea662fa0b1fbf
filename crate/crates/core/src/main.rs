use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use twinforge::dqn::{self, greedy_action};
use twinforge::env::evaluate_physical;
use twinforge::harness::report::{audit, load_convergence_csv, load_utility_csv, render_charts};
use twinforge::harness::{emit_report, parse_config, ExperimentConfig, Runner, Scheme, UtilityReport};
use twinforge::neural::Network;
use twinforge::tuner::{self, PerformanceSurface};
use twinforge::{Error, Result};

#[derive(Parser)]
#[command(name = "twinforge", version, about = "Digital-twin-assisted multi-UAV DQN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single seed, replacing the configured seed list.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds, replacing the configured seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory (default: $TWINFORGE_OUT, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Noise-mode aggregate uses K·delta instead of (M−K)·delta.
    #[arg(long)]
    eq8_literal: bool,
    /// TD targets without discounting.
    #[arg(long)]
    eq7_literal: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured schemes at the base economics point.
    Train(Common),
    /// Evaluate a saved Q-network on the physical fleet.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Q-network snapshot written by `train`.
        #[arg(long)]
        policy: PathBuf,
    },
    /// Train the (delta, K) performance surface.
    Surface(Common),
    /// Train the selector network and print its plans.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Reuse a saved surface instead of training one.
        #[arg(long)]
        surface: Option<PathBuf>,
    },
    /// Run every scheme over the configured sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        surface: Option<PathBuf>,
    },
    /// Audit and re-render an existing output directory.
    Report(Common),
}

fn out_dir(common: &Common) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os("TWINFORGE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.env.eq8_literal |= common.eq8_literal;
    cfg.train.eq7_literal |= common.eq7_literal;
    cfg.validate()?;
    Ok(cfg)
}

fn runner(cfg: ExperimentConfig, surface: Option<&Path>) -> Result<Runner> {
    let runner = Runner::new(cfg)?;
    match surface {
        Some(path) => runner.with_surface(PerformanceSurface::load(path)?),
        None => Ok(runner),
    }
}

fn create(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn print_summary(report: &UtilityReport) {
    println!("{:<16} {:>12} {:>12} {:>12} {:>10} {:>6}", "scheme", "sweep", "rate", "utility", "std_err", "seeds");
    for s in report.summary() {
        let sweep = s.sweep_value.map_or("-".to_string(), |v| format!("{v}"));
        println!(
            "{:<16} {:>12} {:>12.3} {:>12.3} {:>10.3} {:>6}",
            s.scheme, sweep, s.mean_rate, s.mean_utility, s.std_err, s.seeds
        );
    }
}

fn finish(report: &UtilityReport, out: &Path) -> Result<bool> {
    emit_report(report, out)?;
    print_summary(report);
    println!("wrote {}", out.display());
    Ok(report.all_ok())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let mut cfg = load(&common)?;
            cfg.sweep = None;
            let out = out_dir(&common);
            create(&out)?;
            let runner = runner(cfg, None)?;
            let report = runner.sweep();
            for scheme in &runner.config().schemes {
                let Ok(plan) = runner.plan_for(scheme, &runner.config().econ) else { continue };
                for &seed in &runner.config().seeds {
                    if let Ok(o) = &runner.train_one(plan, seed).outcome {
                        let id = twinforge::harness::run::scheme_id(scheme, &plan).replace('/', "_");
                        o.policy.save(&out.join(format!("policy_{id}_seed{seed}.twnn")))?;
                    }
                }
            }
            finish(&report, &out)
        }
        Command::Evaluate { common, policy } => {
            let cfg = load(&common)?;
            let q = Network::load(&policy)?;
            let tcfg = &cfg.train;
            if q.layer_dims() != tcfg.q_dims(&cfg.env) {
                return Err(Error::domain(format!(
                    "policy topology {:?} does not match the configured Q-network {:?}",
                    q.layer_dims(),
                    tcfg.q_dims(&cfg.env)
                )));
            }
            let head = tcfg.q_head(&cfg.env);
            for &seed in &cfg.seeds {
                let users = dqn::users_for_seed(&cfg.env, seed);
                let rate = evaluate_physical(&cfg.env, &users, &|s: &[f64]| greedy_action(&q, head, s), 1)?;
                println!("seed {seed}: mean per-episode sum rate {rate}");
            }
            Ok(true)
        }
        Command::Surface(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&common);
            create(&out)?;
            let runner = runner(cfg, None)?;
            let surface = runner.surface()?;
            let path = out.join("surface.csv");
            surface.save(&path)?;
            for (d, k, c) in surface.iter() {
                println!("delta {d:<6} K {k:<3} rate {:>10.3} ± {:.3} ({} seeds)", c.mean_rate, c.std_err, c.seeds);
            }
            println!("wrote {}", path.display());
            let all_valid = surface.iter().all(|(_, _, c)| c.is_valid());
            Ok(all_valid)
        }
        Command::Tune { common, surface } => {
            let cfg = load(&common)?;
            let out = out_dir(&common);
            create(&out)?;
            let runner = runner(cfg, surface.as_deref())?;
            let g = runner.selector()?;
            g.save(&out.join("selector.twnn"))?;
            runner.surface()?.save(&out.join("surface.csv"))?;
            let m = runner.config().env.m_uavs;
            for (value, econ) in runner.config().econ_points() {
                let o = tuner::tuner_forward(&g, &econ, m)?;
                let plan = runner.plan_for(&Scheme::TunedDt, &econ)?;
                println!(
                    "sweep {:>8} alpha {:>8.3} beta {:>6.3} zeta {:>8.3} eta {:>5.3} -> K {:.3} (deploy {}), delta {:.4} (deploy {})",
                    value.map_or("-".into(), |v| v.to_string()),
                    econ.alpha,
                    econ.beta,
                    econ.zeta,
                    econ.eta,
                    o.k_continuous,
                    plan.physical,
                    o.delta,
                    plan.twin_noise
                );
            }
            Ok(true)
        }
        Command::Sweep { common, surface } => {
            let cfg = load(&common)?;
            let out = out_dir(&common);
            let runner = runner(cfg, surface.as_deref())?;
            let report = runner.sweep();
            finish(&report, &out)
        }
        Command::Report(common) => {
            let out = out_dir(&common);
            let cfg = match &common.config {
                Some(_) => load(&common)?,
                None => parse_config(&out.join("config.cfg"))?,
            };
            let rows = load_utility_csv(&out.join("utility.csv"))?;
            audit(&rows, &cfg)?;
            let logs = load_convergence_csv(&out.join("convergence.csv"))?;
            let label = cfg.sweep.as_ref().map_or("economics point", |s| s.param.as_str());
            render_charts(&rows, &logs.rows, label, &out)?;
            let mut report = UtilityReport::new(&cfg);
            report.rows = rows;
            print_summary(&report);
            println!("audit passed for {} rows", report.rows.len());
            Ok(report.all_ok())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            error!("some rows failed; see utility.csv");
            ExitCode::FAILURE
        }
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
