use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use thickflow::harness::{self, scenarios, Check, ExperimentConfig, RunRecord};
use thickflow::Error;

#[derive(Parser, Debug)]
#[command(
    name = "thickflow",
    version,
    about = "Gradient-constrained incompressible flow experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true, conflicts_with = "scenario")]
    config: Option<PathBuf>,
    /// Built-in scenario: S1, D1, Q1, Q2, zero or oracle.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Output directory for records.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluate pass/fail checks; exit with status 4 if any fails.
    #[arg(long, global = true)]
    assert: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Single run of the configured problem.
    Solve,
    /// Penalty-parameter sweep.
    SweepEps,
    /// Viscosity sweep towards the inviscid limit.
    SweepNu,
    /// Perturbed-threshold pairs against the dependence bound.
    Depend,
    /// Quasi-variational fixed point with its contraction budget.
    Qvi,
    /// One-dimensional penalty-against-projection comparison.
    Oracle,
}

impl Command {
    fn default_scenario(self) -> &'static str {
        match self {
            Self::Solve | Self::SweepEps | Self::SweepNu => "S1",
            Self::Depend => "D1",
            Self::Qvi => "Q1",
            Self::Oracle => "oracle",
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::SweepEps => "sweep-eps",
            Self::SweepNu => "sweep-nu",
            Self::Depend => "depend",
            Self::Qvi => "qvi",
            Self::Oracle => "oracle",
        }
    }
}

enum Failure {
    Config(Error),
    Solver(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Expression { .. } => Failure::Config(e),
            other => Failure::Solver(other),
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&cli.config, &cli.scenario) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => scenarios::builtin(name)?,
        (None, None) => scenarios::builtin(cli.command.default_scenario())?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn save<T: Serialize>(
    out: &Path,
    name: &str,
    report: &T,
    records: &[RunRecord],
) -> Result<(), Error> {
    harness::write_records(out, records)?;
    harness::write_json(&out.join(format!("{name}.json")), report)
}

fn execute(cli: &Cli, cfg: &ExperimentConfig) -> Result<Vec<Check>, Failure> {
    let out = &cli.out;
    let name = cli.command.name();
    std::fs::create_dir_all(out).map_err(|e| Failure::Config(e.into()))?;
    let checks = match cli.command {
        Command::Solve => {
            let rec = harness::cmd_solve(cfg)?;
            let s = &rec.summary;
            println!(
                "{}: excess {:.4e}, final energy {:.6e}, complementarity {:.3e}, momentum residual {:.3e}",
                rec.label(),
                s.max_constraint_excess,
                s.final_energy,
                s.complementarity,
                s.momentum_residual
            );
            save(out, name, &rec, std::slice::from_ref(&rec))?;
            vec![harness::check_energy(&[&rec])]
        }
        Command::SweepEps => {
            let rep = harness::cmd_sweep_eps(cfg, cli.workers)?;
            for (e, r) in rep.values.iter().zip(&rep.records) {
                println!(
                    "eps {e}: excess {:.4e}, complementarity {:.3e}, multiplier mass {:.4e}",
                    r.summary.max_constraint_excess,
                    r.summary.complementarity,
                    r.summary.multiplier_mass
                );
            }
            save(out, name, &rep, &rep.records)?;
            let mut checks = vec![harness::check_energy(
                &rep.records.iter().collect::<Vec<_>>(),
            )];
            checks.extend(harness::check_eps_sweep(&rep, cfg.threshold.psi_star));
            checks
        }
        Command::SweepNu => {
            let rep = harness::cmd_sweep_nu(cfg, cli.workers)?;
            for (i, (n, r)) in rep.sweep.values.iter().zip(&rep.sweep.records).enumerate() {
                let dist = rep.inviscid_distances.as_ref().map_or(f64::NAN, |d| d[i]);
                println!(
                    "nu {n}: excess {:.4e}, momentum residual {:.3e}, |u_nu - u_0| {dist:.4e}",
                    r.summary.max_constraint_excess, r.summary.momentum_residual
                );
            }
            for c in &rep.refinement {
                println!(
                    "nu {}: residual n={} {:.3e}, n={} {:.3e}, ratio {:.3}",
                    c.nu, c.coarse_n, c.coarse_residual, c.fine_n, c.fine_residual, c.ratio
                );
            }
            save(out, name, &rep, &rep.sweep.records)?;
            let mut checks = vec![harness::check_energy(
                &rep.sweep.records.iter().collect::<Vec<_>>(),
            )];
            checks.extend(harness::check_nu_sweep(&rep));
            checks
        }
        Command::Depend => {
            let rep = harness::cmd_depend(cfg, cli.workers)?;
            for c in &rep.cases {
                println!(
                    "delta {}: |u1-u2|^2 {:.4e}, bound {:.4e}, ratio {:.3e}",
                    c.delta, c.linf_l2_sq, c.bound.linf_l2, c.ratio
                );
            }
            println!("log-log slope {:.3}", rep.slope);
            let mut records = vec![rep.base.clone()];
            records.extend(rep.cases.iter().map(|c| c.record.clone()));
            save(out, name, &rep, &records)?;
            vec![
                harness::check_energy(&records.iter().collect::<Vec<_>>()),
                harness::check_depend(&rep),
            ]
        }
        Command::Qvi => {
            let rep = harness::cmd_qvi(cfg)?;
            if let Some(c) = rep.contraction {
                println!(
                    "beta {:.6e}: contraction lhs {:.6}, holds {}",
                    rep.beta, c.lhs, c.holds
                );
            }
            println!("distances {:?}", rep.history.distances);
            println!("ratios {:?}", rep.history.ratios);
            let records: Vec<RunRecord> = rep.record.iter().cloned().collect();
            save(out, name, &rep, &records)?;
            let check = if rep.beta == 0.0 {
                harness::check_constant_functional(&rep, cfg.qvi.tol)
            } else {
                harness::check_qvi(&rep, cfg.qvi.maxiter, cfg.qvi.tol)
            };
            vec![check]
        }
        Command::Oracle => {
            let run = harness::cmd_oracle(cfg)?;
            for (e, g) in run.report.eps.iter().zip(&run.report.relative_gaps) {
                println!("eps {e}: relative L2 gap {g:.4e}");
            }
            save(out, name, &run, &[])?;
            vec![harness::check_oracle(&run, 10.0)]
        }
    };
    Ok(checks)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&cli, &cfg) {
        Ok(checks) => {
            if cli.assert {
                for c in &checks {
                    println!(
                        "{} {}: {}",
                        if c.passed { "PASS" } else { "FAIL" },
                        c.name,
                        c.detail
                    );
                }
                if checks.iter().any(|c| !c.passed) {
                    return ExitCode::from(4);
                }
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Solver(e)) => {
            eprintln!("solver failure in scenario {}: {e}", cfg.scenario);
            ExitCode::from(3)
        }
    }
}
