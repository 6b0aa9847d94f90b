//! Experiment orchestration: named scenarios, sweeps dispatched to a worker
//! pool, structured records and their CSV/JSON output, and the pass/fail
//! checks evaluated on the results.

pub mod config;
pub mod scenarios;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

pub use config::{ExperimentConfig, Resolved, ThresholdKind};

use crate::constraints::expr::Expr;
use crate::constraints::{ThresholdBounds, ThresholdProvider, ThresholdSource};
use crate::error::{Error, Result};
use crate::multiplier::{
    mass_concentration, momentum_residual, trajectory_complementarity, MultiplierField,
};
use crate::oracle::{oracle_sweep, Oracle1DProblem, OracleReport};
use crate::qvi::{
    compute_budget, contraction_holds, dependence_bound, fixed_point, BudgetData,
    ContractionBudget, ContractionCheck, DependenceBound, FixedPointHistory, FixedPointSettings,
    GammaData, SupNormBound,
};
use crate::stepper::{energy_report, StepDiagnostics, Stepper, Trajectory};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Column order of the per-step CSV.
pub const CSV_COLUMNS: [&str; 8] = [
    "t",
    "energy",
    "dissipation",
    "constraint_excess",
    "complementarity",
    "multiplier_mass",
    "picard_iters",
    "div_residual",
];

/// Relative slack of the discrete energy inequality.
pub const ENERGY_SLACK: f64 = 1e-8;
/// Factor on the Gronwall bound for `max_t |u(t)|`.
pub const GRONWALL_FACTOR: f64 = 1.05;
/// Band, as a fraction of `psi_*`, defining the near-active set.
pub const ACTIVE_BAND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub max_constraint_excess: f64,
    pub final_energy: f64,
    /// `int lambda (psi - |Du|)_+ / int lambda`.
    pub complementarity: f64,
    pub multiplier_mass: f64,
    /// Fraction of multiplier mass where `|Du| >= psi - 0.05 psi_*`.
    pub mass_near_active: f64,
    pub momentum_residual: f64,
    pub max_div_residual: f64,
    pub max_velocity: f64,
    pub energy_residual: f64,
    pub energy_scale: f64,
    pub energy_inequality_holds: bool,
    pub linf_l2: f64,
    pub gronwall_bound: f64,
    pub gronwall_holds: bool,
    pub forcing_l2: f64,
    pub inner_iterations: usize,
    pub unconverged_steps: usize,
}

impl Summary {
    pub fn of(traj: &Trajectory, forcing: &crate::stepper::ForceProvider, psi_star: f64) -> Self {
        let energy = energy_report(traj);
        let dt = traj.dt();
        let diags = &traj.diagnostics;
        Self {
            max_constraint_excess: traj.max_constraint_excess(),
            final_energy: diags.last().map_or(0.0, |d| d.energy),
            complementarity: trajectory_complementarity(traj),
            multiplier_mass: MultiplierField::from_trajectory(traj).total_mass(traj.grid.h(), dt),
            mass_near_active: mass_concentration(traj, ACTIVE_BAND * psi_star),
            momentum_residual: momentum_residual(traj, forcing).max,
            max_div_residual: diags.iter().map(|d| d.div_residual).fold(0.0, f64::max),
            max_velocity: traj.max_velocity(),
            energy_residual: energy.max_residual,
            energy_scale: energy.scale,
            energy_inequality_holds: energy.holds(ENERGY_SLACK),
            linf_l2: energy.linf_l2,
            gronwall_bound: energy.gronwall_bound,
            gronwall_holds: energy.gronwall_holds(GRONWALL_FACTOR),
            forcing_l2: diags.iter().map(|d| dt * d.forcing_sq).sum::<f64>().sqrt(),
            inner_iterations: diags.iter().map(|d| d.picard_iters).sum(),
            unconverged_steps: diags.iter().filter(|d| !d.picard_converged).count(),
        }
    }
}

/// Self-describing result of one solver run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub scenario: String,
    pub experiment: String,
    /// Swept parameters of this run.
    pub parameters: BTreeMap<String, f64>,
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub diagnostics: Vec<StepDiagnostics>,
    pub wall_time_s: f64,
    pub code_version: String,
}

impl RunRecord {
    /// File stem `scenario_experiment[_key-value...]`.
    pub fn label(&self) -> String {
        let mut s = format!("{}_{}", self.scenario, self.experiment);
        for (k, v) in &self.parameters {
            s.push_str(&format!("_{k}-{v}"));
        }
        s.replace(['/', ' '], "-")
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_csv(&mut buf, &self.diagnostics)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

pub fn write_csv<W: Write>(w: W, diags: &[StepDiagnostics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for d in diags {
        out.write_record([
            d.t.to_string(),
            d.energy.to_string(),
            d.dissipation.to_string(),
            d.constraint_excess.to_string(),
            d.complementarity.to_string(),
            d.multiplier_mass.to_string(),
            d.picard_iters.to_string(),
            d.div_residual.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `<label>.csv` and `<label>.json` for each record.
pub fn write_records(dir: &Path, records: &[RunRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in records {
        let label = r.label();
        write_csv(
            std::fs::File::create(dir.join(format!("{label}.csv")))?,
            &r.diagnostics,
        )?;
        write_json(&dir.join(format!("{label}.json")), r)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

/// Runs `jobs` on a pool of `workers` threads; results keep job order.
pub fn parallel<T, F>(workers: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| (0..jobs).into_par_iter().map(&f).collect())
}

/// A record together with the trajectory it summarizes.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub trajectory: Trajectory,
}

fn with_context(scenario: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("scenario {scenario}: {m}")),
        other => other,
    }
}

/// One solver run. Functional thresholds are evaluated on the state at rest.
pub fn run_config(
    cfg: &ExperimentConfig,
    experiment: &str,
    parameters: &[(&str, f64)],
) -> Result<RunOutput> {
    let r = cfg.resolve().map_err(|e| with_context(&cfg.scenario, e))?;
    run_resolved(cfg, &r, experiment, parameters)
}

pub fn run_resolved(
    cfg: &ExperimentConfig,
    r: &Resolved,
    experiment: &str,
    parameters: &[(&str, f64)],
) -> Result<RunOutput> {
    let start = Instant::now();
    let stepper = Stepper::new(r.grid.clone(), r.solver)?;
    let rest = r.threshold.is_functional().then(|| {
        Trajectory::constant(&stepper, &crate::grid::VelocityField::zeros(&r.grid.domain))
    });
    let traj = stepper.run(&r.u0, &r.threshold, &r.forcing, rest.as_ref(), None)?;
    Ok(RunOutput {
        record: make_record(cfg, experiment, parameters, &traj, &r.forcing, start),
        trajectory: traj,
    })
}

fn make_record(
    cfg: &ExperimentConfig,
    experiment: &str,
    parameters: &[(&str, f64)],
    traj: &Trajectory,
    forcing: &crate::stepper::ForceProvider,
    start: Instant,
) -> RunRecord {
    RunRecord {
        scenario: cfg.scenario.clone(),
        experiment: experiment.into(),
        parameters: parameters
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
        config: cfg.clone(),
        summary: Summary::of(traj, forcing, cfg.threshold.psi_star),
        diagnostics: traj.diagnostics.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
        code_version: CODE_VERSION.into(),
    }
}

pub fn cmd_solve(cfg: &ExperimentConfig) -> Result<RunRecord> {
    Ok(run_config(cfg, "solve", &[])?.record)
}

fn with_eps(cfg: &ExperimentConfig, eps: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.solver.eps = eps;
    c
}

fn with_nu(cfg: &ExperimentConfig, nu: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.solver.nu = nu;
    c
}

/// Same final time on an `n x n` grid with the default step `h/4`.
pub fn with_resolution(cfg: &ExperimentConfig, n: usize) -> Result<ExperimentConfig> {
    let d = cfg.domain()?;
    let t_end = cfg.solver_config(&d)?.t_end;
    let mut c = cfg.clone();
    c.domain.nx = n;
    c.domain.ny = n * cfg.domain.ny / cfg.domain.nx;
    c.solver.dt = None;
    c.solver.steps = None;
    c.solver.t_end = Some(t_end);
    Ok(c)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub axis: String,
    pub values: Vec<f64>,
    pub records: Vec<RunRecord>,
}

impl SweepReport {
    pub fn excess(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.summary.max_constraint_excess)
            .collect()
    }

    pub fn complementarity(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.summary.complementarity)
            .collect()
    }
}

pub fn sweep_eps_runs(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<RunOutput>> {
    let eps = &cfg.sweep.eps;
    parallel(workers, eps.len(), |k| {
        run_config(&with_eps(cfg, eps[k]), "sweep-eps", &[("eps", eps[k])])
    })
}

pub fn cmd_sweep_eps(cfg: &ExperimentConfig, workers: usize) -> Result<SweepReport> {
    let runs = sweep_eps_runs(cfg, workers)?;
    Ok(SweepReport {
        axis: "eps".into(),
        values: cfg.sweep.eps.clone(),
        records: runs.into_iter().map(|r| r.record).collect(),
    })
}

/// Viscosity sweep with distances to the inviscid run and an optional
/// two-resolution check of the momentum residual.
#[derive(Debug, Clone, Serialize)]
pub struct NuSweepReport {
    pub sweep: SweepReport,
    /// `|u_nu - u_0|_{L2(Q_T)}` for each swept `nu`, when `0` is swept.
    pub inviscid_distances: Option<Vec<f64>>,
    pub refinement: Vec<RefinementCase>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefinementCase {
    pub nu: f64,
    pub coarse_n: usize,
    pub fine_n: usize,
    pub coarse_residual: f64,
    pub fine_residual: f64,
    pub ratio: f64,
}

pub fn inviscid_distances(values: &[f64], trajs: &[&Trajectory]) -> Result<Option<Vec<f64>>> {
    match values.iter().position(|&v| v == 0.0) {
        Some(k0) => Ok(Some(
            trajs
                .iter()
                .map(|t| t.l2_distance(trajs[k0]))
                .collect::<Result<Vec<_>>>()?,
        )),
        None => Ok(None),
    }
}

pub fn cmd_sweep_nu(cfg: &ExperimentConfig, workers: usize) -> Result<NuSweepReport> {
    let nus = &cfg.sweep.nu;
    let coarse: Vec<usize> = cfg
        .sweep
        .n
        .iter()
        .copied()
        .filter(|&n| n != cfg.domain.nx)
        .collect();
    let jobs = nus.len() * (1 + coarse.len());
    let runs = parallel(workers, jobs, |k| {
        let (level, i) = (k / nus.len(), k % nus.len());
        let base = with_nu(cfg, nus[i]);
        if level == 0 {
            run_config(&base, "sweep-nu", &[("nu", nus[i])])
        } else {
            let n = coarse[level - 1];
            run_config(
                &with_resolution(&base, n)?,
                "sweep-nu",
                &[("nu", nus[i]), ("n", n as f64)],
            )
        }
    })?;
    let fine: Vec<&Trajectory> = runs[..nus.len()].iter().map(|r| &r.trajectory).collect();
    let inviscid = inviscid_distances(nus, &fine)?;
    let mut refinement = Vec::new();
    for (level, &n) in coarse.iter().enumerate() {
        for (i, &nu) in nus.iter().enumerate() {
            let c = runs[(level + 1) * nus.len() + i]
                .record
                .summary
                .momentum_residual;
            let f = runs[i].record.summary.momentum_residual;
            refinement.push(RefinementCase {
                nu,
                coarse_n: n,
                fine_n: cfg.domain.nx,
                coarse_residual: c,
                fine_residual: f,
                ratio: f / c,
            });
        }
    }
    Ok(NuSweepReport {
        sweep: SweepReport {
            axis: "nu".into(),
            values: nus.clone(),
            records: runs.into_iter().map(|r| r.record).collect(),
        },
        inviscid_distances: inviscid,
        refinement,
    })
}

/// Constants for a given-threshold problem; the sup norm comes from the
/// Korn constant when configured, else from the measured velocities.
pub fn budget_for(
    cfg: &ExperimentConfig,
    traj: &Trajectory,
    measured_sup: f64,
    psi_upper: f64,
    f2_l2: f64,
) -> Result<ContractionBudget> {
    let d = traj.grid.domain;
    let f1 = traj
        .diagnostics
        .iter()
        .map(|x| traj.dt() * x.forcing_sq)
        .sum::<f64>()
        .sqrt();
    let sup_bound = match (cfg.qvi.korn_k, cfg.qvi.korn_p) {
        (Some(k_p), Some(p)) => SupNormBound::Korn { k_p, p },
        _ => SupNormBound::Pilot {
            measured: measured_sup,
        },
    };
    let data = BudgetData {
        nu: traj.config.nu,
        t_end: traj.final_time(),
        area: d.area(),
        dim: 2,
        kappa: BudgetData::rectangle_kappa(d.lx, d.ly),
        psi_star: cfg.threshold.psi_star,
        psi_upper,
        f1_l2: f1,
        f2_l2,
        u0_l2: traj.grid.inner(&traj.initial, &traj.initial).sqrt(),
        sup_bound: Some(sup_bound),
    };
    compute_budget(&data, GammaData::constant)
}

#[derive(Debug, Clone, Serialize)]
pub struct DependCase {
    pub delta: f64,
    pub dpsi_inf: f64,
    /// `|u1 - u2|^2_{L-inf(L2)}`.
    pub linf_l2_sq: f64,
    /// The same plus `nu |D(u1 - u2)|^2_{L2(Q_T)}`.
    pub with_dissipation: f64,
    pub bound: DependenceBound,
    /// Measured over bound, for each of the two estimates.
    pub ratio: f64,
    pub ratio_with_dissipation: f64,
    pub record: RunRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct DependReport {
    pub base: RunRecord,
    pub budget: ContractionBudget,
    pub cases: Vec<DependCase>,
    /// Least-squares slope of `log |u1 - u2|^2` against `log delta`.
    pub slope: f64,
}

pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Threshold `psi + delta * perturbation` for a given base threshold.
pub fn perturbed_threshold(
    base: &ThresholdProvider,
    perturbation: &Expr,
    delta: f64,
    psi_upper: f64,
) -> Result<ThresholdProvider> {
    let combined = |base_src: &str| {
        Expr::parse(&format!(
            "({base_src}) + {delta:e} * ({})",
            perturbation.source()
        ))
    };
    let source = match &base.source {
        ThresholdSource::Constant(c) => ThresholdSource::Analytic(combined(&format!("{c:e}"))?),
        ThresholdSource::Analytic(e) => ThresholdSource::Analytic(combined(e.source())?),
        _ => {
            return Err(Error::Config(
                "depend: the base threshold must be constant or analytic".into(),
            ))
        }
    };
    Ok(ThresholdProvider::new(
        source,
        ThresholdBounds::new(base.bounds.psi_star, psi_upper)?,
    ))
}

/// Runs the unperturbed case and, for each `delta`, the case with threshold
/// `psi + delta * perturbation`; compares against the dependence bound.
pub fn depend_from_base(
    cfg: &ExperimentConfig,
    base: &RunOutput,
    workers: usize,
) -> Result<DependReport> {
    let r = cfg.resolve()?;
    let pert = Expr::parse(&cfg.depend.perturbation)
        .map_err(|e| Error::Config(format!("depend.perturbation: {e}")))?;
    let deltas = &cfg.sweep.delta;
    let stepper = Stepper::new(r.grid.clone(), r.solver)?;
    let runs = parallel(workers, deltas.len(), |k| {
        let start = Instant::now();
        let psi2 = perturbed_threshold(&r.threshold, &pert, deltas[k], cfg.threshold.psi_upper)?;
        let traj = stepper.run(&r.u0, &psi2, &r.forcing, None, None)?;
        let record = make_record(
            cfg,
            "depend",
            &[("delta", deltas[k])],
            &traj,
            &r.forcing,
            start,
        );
        Ok(RunOutput {
            record,
            trajectory: traj,
        })
    })?;
    let sup = runs
        .iter()
        .map(|o| o.trajectory.max_velocity())
        .fold(base.trajectory.max_velocity(), f64::max);
    let f_l2 = base.record.summary.forcing_l2;
    let budget = budget_for(cfg, &base.trajectory, sup, cfg.threshold.psi_upper, f_l2)?;
    let mut cases = Vec::with_capacity(runs.len());
    for (k, out) in runs.into_iter().enumerate() {
        let dpsi_inf = (0..base.trajectory.len())
            .map(|s| {
                let a = &base.trajectory.psi[s];
                let b = &out.trajectory.psi[s];
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        let linf = out.trajectory.linf_l2_distance_sq(&base.trajectory)?;
        let v2 = out.trajectory.v2_distance(&base.trajectory)?;
        let with_dissipation = linf + r.solver.nu * v2 * v2;
        let bound = dependence_bound(0.0, 0.0, dpsi_inf, &budget);
        cases.push(DependCase {
            delta: deltas[k],
            dpsi_inf,
            linf_l2_sq: linf,
            with_dissipation,
            ratio: linf / bound.linf_l2,
            ratio_with_dissipation: with_dissipation / bound.with_dissipation,
            bound,
            record: out.record,
        });
    }
    let slope = loglog_slope(
        &cases.iter().map(|c| c.delta).collect::<Vec<_>>(),
        &cases.iter().map(|c| c.linf_l2_sq).collect::<Vec<_>>(),
    );
    Ok(DependReport {
        base: base.record.clone(),
        budget,
        cases,
        slope,
    })
}

pub fn cmd_depend(cfg: &ExperimentConfig, workers: usize) -> Result<DependReport> {
    let base = run_config(cfg, "depend", &[("delta", 0.0)])?;
    depend_from_base(cfg, &base, workers)
}

#[derive(Debug, Clone, Serialize)]
pub struct QviReport {
    pub beta: f64,
    pub budget: Option<ContractionBudget>,
    pub contraction: Option<ContractionCheck>,
    pub history: FixedPointHistory,
    pub pilot_max_velocity: f64,
    pub record: Option<RunRecord>,
}

/// Budget of a norm functional with the given `beta`.
fn norm_budget(cfg: &ExperimentConfig, pilot: &Trajectory, beta: f64) -> Result<ContractionBudget> {
    let t = &cfg.threshold;
    let alpha = t.alpha.unwrap_or(1.0);
    let d = pilot.grid.domain;
    let phi = Expr::parse(t.phi.as_deref().unwrap_or("1"))?;
    let times: Vec<f64> = pilot.states.iter().map(|s| s.t).collect();
    let nf = crate::constraints::NormFunctional::new(alpha, beta, phi)?;
    let (_, phi_upper) = nf.phi_range(&d, &times);
    let f1 = pilot
        .diagnostics
        .iter()
        .map(|x| pilot.dt() * x.forcing_sq)
        .sum::<f64>()
        .sqrt();
    let sup_bound = match (cfg.qvi.korn_k, cfg.qvi.korn_p) {
        (Some(k_p), Some(p)) => SupNormBound::Korn { k_p, p },
        _ => SupNormBound::Pilot {
            measured: pilot.max_velocity(),
        },
    };
    let data = BudgetData {
        nu: pilot.config.nu,
        t_end: pilot.final_time(),
        area: d.area(),
        dim: 2,
        kappa: BudgetData::rectangle_kappa(d.lx, d.ly),
        psi_star: t.psi_star,
        psi_upper: t.psi_upper,
        f1_l2: f1,
        f2_l2: f1,
        u0_l2: pilot.grid.inner(&pilot.initial, &pilot.initial).sqrt(),
        sup_bound: Some(sup_bound),
    };
    compute_budget(&data, |r| GammaData::norm_functional(&nf, phi_upper, r))
}

/// Largest `beta` whose contraction left-hand side does not exceed
/// `target`, by bisection in `log beta`.
pub fn calibrate_beta(cfg: &ExperimentConfig, pilot: &Trajectory, target: f64) -> Result<f64> {
    let lhs = |b: f64| -> Result<f64> { Ok(contraction_holds(&norm_budget(cfg, pilot, b)?).lhs) };
    let (mut lo, mut hi) = (-30.0f64, 10.0f64);
    if lhs(hi.exp())? <= target {
        return Ok(hi.exp());
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lhs(mid.exp())? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo.exp())
}

/// Fixed-point iteration for a functional threshold. For the norm
/// functional the budget is computed and, when `beta` is not configured,
/// `beta` is calibrated so that the contraction left-hand side equals the
/// configured target.
pub fn cmd_qvi(cfg: &ExperimentConfig) -> Result<QviReport> {
    let r0 = cfg.resolve_with_beta((cfg.threshold.kind == ThresholdKind::Norm).then_some(0.0))?;
    if !r0.threshold.is_functional() {
        return Err(Error::Config(
            "qvi: threshold.kind must be norm, kernel or parabolic".into(),
        ));
    }
    let stepper = Stepper::new(r0.grid.clone(), r0.solver)?;
    let rest = Trajectory::constant(
        &stepper,
        &crate::grid::VelocityField::zeros(&r0.grid.domain),
    );
    let pilot = stepper.run(&r0.u0, &r0.threshold, &r0.forcing, Some(&rest), None)?;
    let (beta, budget, contraction) = if cfg.threshold.kind == ThresholdKind::Norm {
        let beta = match cfg.threshold.beta {
            Some(b) => b,
            None => calibrate_beta(cfg, &pilot, cfg.qvi.target_lhs)?,
        };
        let b = norm_budget(cfg, &pilot, beta)?;
        (beta, Some(b), Some(contraction_holds(&b)))
    } else {
        (f64::NAN, None, None)
    };
    let r = if cfg.threshold.kind == ThresholdKind::Norm {
        cfg.resolve_with_beta(Some(beta))?
    } else {
        r0.clone()
    };
    let start = Instant::now();
    let history = match fixed_point(
        &stepper,
        &r.u0,
        &r.threshold,
        &r.forcing,
        &rest,
        FixedPointSettings {
            tol: cfg.qvi.tol,
            maxiter: cfg.qvi.maxiter,
            r_star: budget.map(|b| b.r_star),
        },
    ) {
        Ok(h) => h,
        Err(Error::NotConverged { history, .. }) => *history,
        Err(e) => return Err(e),
    };
    let record = history
        .final_trajectory
        .as_ref()
        .map(|t| make_record(cfg, "qvi", &[("beta", beta)], t, &r.forcing, start));
    Ok(QviReport {
        beta,
        budget,
        contraction,
        history,
        pilot_max_velocity: pilot.max_velocity(),
        record,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleRun {
    pub problem: Oracle1DProblem,
    pub report: OracleReport,
    pub wall_time_s: f64,
}

pub fn oracle_problem(cfg: &ExperimentConfig) -> Result<Oracle1DProblem> {
    let o = &cfg.oracle;
    let psi = Expr::parse(&o.psi).map_err(|e| Error::Config(format!("oracle.psi: {e}")))?;
    let f = Expr::parse(&o.f).map_err(|e| Error::Config(format!("oracle.f: {e}")))?;
    Oracle1DProblem::from_fns(
        o.n,
        o.nu,
        o.t_end / o.steps as f64,
        o.t_end,
        |x| psi.eval_xyt(x, 0.0, 0.0),
        |x| f.eval_xyt(x, 0.0, 0.0),
        |_| 0.0,
    )
}

pub fn cmd_oracle(cfg: &ExperimentConfig) -> Result<OracleRun> {
    let start = Instant::now();
    let problem = oracle_problem(cfg)?;
    let report = oracle_sweep(&problem, &cfg.oracle.eps)?;
    Ok(OracleRun {
        problem,
        report,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Outcome of one pass/fail check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// `values[k + 1] <= (1 + band) values[k]` along the sequence.
pub fn nonincreasing_within(values: &[f64], band: f64) -> bool {
    values
        .windows(2)
        .all(|w| w[1] <= (1.0 + band) * w[0] + 1e-15)
}

pub fn check_energy(records: &[&RunRecord]) -> Check {
    let bad: Vec<String> = records
        .iter()
        .filter(|r| !(r.summary.energy_inequality_holds && r.summary.gronwall_holds))
        .map(|r| r.label())
        .collect();
    let worst = records
        .iter()
        .map(|r| r.summary.energy_residual / r.summary.energy_scale)
        .fold(0.0, f64::max);
    let worst_gronwall = records
        .iter()
        .map(|r| r.summary.linf_l2 / r.summary.gronwall_bound)
        .fold(0.0, f64::max);
    Check::new(
        "energy inequality",
        bad.is_empty(),
        format!(
            "{} runs; worst relative energy residual {worst:.2e}; worst |u|/Gronwall {worst_gronwall:.3}{}",
            records.len(),
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(", ")) }
        ),
    )
}

pub fn check_eps_sweep(rep: &SweepReport, psi_star: f64) -> Vec<Check> {
    let ex = rep.excess();
    let comp = rep.complementarity();
    let last = rep.records.last();
    let final_excess = ex.last().copied().unwrap_or(f64::NAN);
    let final_comp = comp.last().copied().unwrap_or(f64::NAN);
    let mass = last.map_or(f64::NAN, |r| r.summary.mass_near_active);
    vec![
        Check::new(
            "constraint enforcement",
            nonincreasing_within(&ex, 0.05) && final_excess <= 0.05 * psi_star,
            format!(
                "excess along eps {:?}: {:?}; limit {:.3}",
                rep.values,
                ex,
                0.05 * psi_star
            ),
        ),
        Check::new(
            "complementarity",
            nonincreasing_within(&comp, 0.05) && final_comp <= 0.1 * psi_star && mass >= 0.95,
            format!("normalized residual {comp:?}; multiplier mass near active set {mass:.4}"),
        ),
    ]
}

pub fn check_nu_sweep(rep: &NuSweepReport) -> Vec<Check> {
    let mut out = Vec::new();
    let ex = rep.sweep.excess();
    let nus = &rep.sweep.values;
    let at = |v: f64| nus.iter().position(|&x| x == v);
    if let (Some(i0), Some(i1)) = (at(0.0), at(0.1)) {
        let failures: usize = rep
            .sweep
            .records
            .iter()
            .map(|r| r.summary.unconverged_steps)
            .sum();
        let dist = rep.inviscid_distances.clone().unwrap_or_default();
        let viscous: Vec<f64> = dist
            .iter()
            .zip(nus)
            .filter(|(_, &n)| n > 0.0)
            .map(|(d, _)| *d)
            .collect();
        out.push(Check::new(
            "inviscid limit",
            failures == 0 && ex[i0] <= 1.5 * ex[i1] && nonincreasing_within(&viscous, 0.1),
            format!(
                "nu {nus:?}: excess {ex:?} (ratio {:.3}); |u_nu - u_0| {dist:?}; unconverged steps {failures}",
                ex[i0] / ex[i1]
            ),
        ));
    }
    if !rep.refinement.is_empty() {
        let wanted: Vec<&RefinementCase> = rep
            .refinement
            .iter()
            .filter(|c| c.nu == 0.1 || c.nu == 0.0)
            .collect();
        out.push(Check::new(
            "momentum residual",
            !wanted.is_empty() && wanted.iter().all(|c| c.ratio <= 0.5),
            wanted
                .iter()
                .map(|c| {
                    format!(
                        "nu {}: {:.3e} -> {:.3e} (ratio {:.3})",
                        c.nu, c.coarse_residual, c.fine_residual, c.ratio
                    )
                })
                .collect::<Vec<_>>()
                .join("; "),
        ));
    }
    out
}

pub fn check_depend(rep: &DependReport) -> Check {
    let ok_ratio = rep.cases.iter().all(|c| c.ratio <= 1.1);
    let ok_slope = (rep.slope - 1.0).abs() <= 0.3;
    Check::new(
        "continuous dependence",
        ok_ratio && ok_slope,
        format!(
            "delta {:?}: measured/bound {:?}; log-log slope {:.3} (target 1.0 +- 0.3)",
            rep.cases.iter().map(|c| c.delta).collect::<Vec<_>>(),
            rep.cases.iter().map(|c| c.ratio).collect::<Vec<_>>(),
            rep.slope
        ),
    )
}

pub fn check_qvi(rep: &QviReport, maxiter: usize, tol: f64) -> Check {
    let holds = rep.contraction.is_some_and(|c| c.holds);
    let ratios_ok = rep.history.ratios.iter().all(|&r| r < 1.0);
    Check::new(
        "QVI contraction",
        holds && ratios_ok && rep.history.converged && rep.history.iterations() <= maxiter,
        format!(
            "beta {:.4e}; contraction lhs {:.4}; distances {:?}; ratios {:?}; tol {tol:.0e}",
            rep.beta,
            rep.contraction.map_or(f64::NAN, |c| c.lhs),
            rep.history.distances,
            rep.history.ratios
        ),
    )
}

pub fn check_constant_functional(rep: &QviReport, tol: f64) -> Check {
    let d = &rep.history.distances;
    Check::new(
        "constant-functional degeneracy",
        rep.history.converged && d.len() == 2 && d[1] <= tol,
        format!("distances {d:?}; tolerance {tol:.0e}"),
    )
}

pub fn check_oracle(run: &OracleRun, time_limit_s: f64) -> Check {
    let r = &run.report;
    let idx = |e: f64| r.eps.iter().position(|&x| (x - e).abs() < 1e-12);
    let passed = match (idx(0.1), idx(0.4)) {
        (Some(a), Some(b)) => {
            r.gaps[a] <= 1e-2 * r.reference_norm
                && r.gaps[a] < r.gaps[b]
                && run.wall_time_s <= time_limit_s
        }
        _ => false,
    };
    Check::new(
        "oracle equivalence",
        passed,
        format!(
            "eps {:?}: relative gaps {:?}; {:.2} s",
            r.eps, r.relative_gaps, run.wall_time_s
        ),
    )
}
