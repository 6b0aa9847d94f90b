//! Backward-Euler time stepping of the penalized system
//!
//! ```text
//! (u' - u)/dt - div((nu + k_eps(|Du'|^2 - psi^2) + eps |Du'|^(q-2)) Du')
//!     + C(u) u' + grad p = f,     div u' = 0,
//! ```
//!
//! with the viscosity lagged in a relaxed Picard loop. Each linear problem is
//! posed on the discrete stream-function basis, so every iterate is exactly
//! divergence-free and the skew convection drops out of the energy balance.

use serde::{Deserialize, Serialize};

use std::fmt;
use std::sync::Arc;

use crate::constraints::expr::Expr;
use crate::constraints::ThresholdProvider;
use crate::error::{Error, Result};
use crate::grid::{Domain, Grid, ScalarField, VelocityField};
use crate::penalty::{k_eps, k_eps_prime, penalty_viscosity, q_viscosity, PenaltyParams};
use crate::sparse::{bicgstab, Banded, BandedLu, Csr};

/// Body force `f(x, y, t)`.
#[derive(Clone, Default)]
pub enum ForceProvider {
    #[default]
    Zero,
    Analytic {
        fx: Expr,
        fy: Expr,
    },
    Function(Arc<dyn Fn(f64, f64, f64) -> (f64, f64) + Send + Sync>),
}

impl fmt::Debug for ForceProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("Zero"),
            Self::Analytic { fx, fy } => write!(f, "Analytic({fx}, {fy})"),
            Self::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl ForceProvider {
    pub fn analytic(fx: &str, fy: &str) -> Result<Self> {
        Ok(Self::Analytic {
            fx: Expr::parse(fx)?,
            fy: Expr::parse(fy)?,
        })
    }

    pub fn value(&self, x: f64, y: f64, t: f64) -> (f64, f64) {
        match self {
            Self::Zero => (0.0, 0.0),
            Self::Analytic { fx, fy } => (fx.eval_xyt(x, y, t), fy.eval_xyt(x, y, t)),
            Self::Function(g) => g(x, y, t),
        }
    }

    /// Face samples at time `t`.
    pub fn sample(&self, d: &Domain, t: f64) -> VelocityField {
        match self {
            Self::Zero => VelocityField::zeros(d),
            _ => VelocityField::from_fn(d, |x, y| self.value(x, y, t)),
        }
    }
}

/// Inner iteration for the nonlinear viscosity within a time step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerSolver {
    /// Linearization including the viscosity derivative, with residual
    /// backtracking.
    #[default]
    Newton,
    /// Lagged viscosity, under-relaxed by `relax`.
    Picard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub nu: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Relative velocity update that ends the Picard loop.
    pub picard_tol: f64,
    pub picard_max: usize,
    /// Under-relaxation of the Picard update, in `(0, 1]`.
    pub relax: f64,
    pub penalty: PenaltyParams,
    pub inner: InnerSolver,
    /// Divergence tolerance as a multiple of `|u|_inf / h`.
    pub div_tol_factor: f64,
}

impl SolverConfig {
    pub fn new(nu: f64, dt: f64, t_end: f64, penalty: PenaltyParams) -> Result<Self> {
        let cfg = Self {
            nu,
            dt,
            t_end,
            picard_tol: 1e-6,
            picard_max: 50,
            relax: 0.7,
            penalty,
            inner: InnerSolver::Newton,
            div_tol_factor: 1e-10,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Advective step `h / (4 max(1, |u|_inf))`.
    pub fn default_dt(h: f64, velocity_estimate: f64) -> f64 {
        h / (4.0 * velocity_estimate.max(1.0))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(Error::InvalidParameter { name, reason });
        if !(self.dt > 0.0) {
            return bad("dt", format!("must be positive, got {}", self.dt));
        }
        if !(self.t_end >= self.dt * (1.0 - 1e-12)) {
            return bad("t_end", format!("must be at least dt, got {}", self.t_end));
        }
        if !(self.picard_tol > 0.0 && self.picard_tol < 1.0) {
            return bad(
                "picard_tol",
                format!("must lie in (0, 1), got {}", self.picard_tol),
            );
        }
        if !(self.nu >= 0.0) {
            return bad("nu", format!("must be nonnegative, got {}", self.nu));
        }
        if !(self.relax > 0.0 && self.relax <= 1.0) {
            return bad("relax", format!("must lie in (0, 1], got {}", self.relax));
        }
        if self.picard_max == 0 {
            return bad("picard_max", "must be positive".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub u: VelocityField,
    pub pressure: ScalarField,
    /// `k_eps(|Du|^2 - psi^2)` at the accepted velocity.
    pub lambda: ScalarField,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: f64,
    /// `|u|^2 / 2`.
    pub energy: f64,
    /// `nu int |Du|^2`.
    pub dissipation: f64,
    /// `max (|Du| - psi)_+`.
    pub constraint_excess: f64,
    pub complementarity: f64,
    /// `int lambda`.
    pub multiplier_mass: f64,
    pub picard_iters: usize,
    pub picard_converged: bool,
    pub relax: f64,
    pub div_residual: f64,
    /// `<f, u>` at the new time level.
    pub forcing_power: f64,
    /// `|f|^2` at the new time level.
    pub forcing_sq: f64,
}

/// Time series produced by [`Stepper::run`].
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: Grid,
    pub config: SolverConfig,
    pub initial: VelocityField,
    pub states: Vec<FlowState>,
    /// Threshold used at each step.
    pub psi: Vec<ScalarField>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    /// Trajectory that stays at `u` for every step of the stepper's horizon,
    /// with zero pressure, multiplier and threshold.
    pub fn constant(stepper: &Stepper, u: &VelocityField) -> Self {
        let d = stepper.grid.domain;
        let steps = stepper.config.steps();
        let states = (0..steps)
            .map(|k| FlowState {
                t: (k + 1) as f64 * stepper.config.dt,
                u: u.clone(),
                pressure: ScalarField::zeros(&d),
                lambda: ScalarField::zeros(&d),
            })
            .collect();
        Self {
            grid: stepper.grid.clone(),
            config: stepper.config,
            initial: u.clone(),
            states,
            psi: vec![ScalarField::zeros(&d); steps],
            diagnostics: Vec::new(),
        }
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        self.states.last().map_or(0.0, |s| s.t)
    }

    /// Discrete `|Dw|_{L2(Q_T)}`: `(sum_steps sum_cells |Dw|^2 h^2 dt)^(1/2)`.
    pub fn v2_norm(&self) -> f64 {
        let h = self.grid.h();
        self.states
            .iter()
            .map(|s| {
                let g = self.grid.strain_norm(&s.u);
                g.inner(&g, h) * self.dt()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Discrete `|D(u - v)|_{L2(Q_T)}` over a common timeline.
    pub fn v2_distance(&self, other: &Trajectory) -> Result<f64> {
        self.check_compatible(other)?;
        let h = self.grid.h();
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| {
                let g = self.grid.strain_norm(&a.u.sub(&b.u));
                g.inner(&g, h) * self.dt()
            })
            .sum::<f64>()
            .sqrt())
    }

    /// `|u - v|_{L2(Q_T)}`.
    pub fn l2_distance(&self, other: &Trajectory) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| {
                let e = a.u.sub(&b.u);
                self.grid.inner(&e, &e) * self.dt()
            })
            .sum::<f64>()
            .sqrt())
    }

    /// `max_t |u(t) - v(t)|_{L2}^2`.
    pub fn linf_l2_distance_sq(&self, other: &Trajectory) -> Result<f64> {
        self.check_compatible(other)?;
        let e0 = self.initial.sub(&other.initial);
        let start = self.grid.inner(&e0, &e0);
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| {
                let e = a.u.sub(&b.u);
                self.grid.inner(&e, &e)
            })
            .fold(start, f64::max))
    }

    /// `max_t |u(t)|_{L2}`.
    pub fn linf_l2_norm(&self) -> f64 {
        let start = self.grid.norms(&self.initial).l2;
        self.states
            .iter()
            .map(|s| self.grid.norms(&s.u).l2)
            .fold(start, f64::max)
    }

    pub fn max_velocity(&self) -> f64 {
        self.states
            .iter()
            .map(|s| s.u.linf())
            .fold(self.initial.linf(), f64::max)
    }

    pub fn max_constraint_excess(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.constraint_excess)
            .fold(0.0, f64::max)
    }

    fn check_compatible(&self, other: &Trajectory) -> Result<()> {
        if self.grid.domain != other.grid.domain || self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "trajectories differ: {}x{} grid with {} steps vs {}x{} with {}",
                self.grid.domain.nx,
                self.grid.domain.ny,
                self.len(),
                other.grid.domain.nx,
                other.grid.domain.ny,
                other.len()
            )));
        }
        Ok(())
    }
}

/// Per-cell discrete energy balance `LHS - RHS` of
/// `|u(t)|^2/2 + nu int_0^t |Du|^2 <= int_0^t <f, u> + |u0|^2/2`.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// Normalization `max(1, energy scale)` for the relative slack.
    pub scale: f64,
    /// `max_t |u(t)|_{L2}`.
    pub linf_l2: f64,
    /// `e^(T/2) (|f|^2_{L2(Q_T)} + |u0|^2)^(1/2)`.
    pub gronwall_bound: f64,
}

impl EnergyReport {
    pub fn holds(&self, rel_slack: f64) -> bool {
        self.max_residual <= rel_slack * self.scale
    }

    pub fn gronwall_holds(&self, factor: f64) -> bool {
        self.linf_l2 <= factor * self.gronwall_bound
    }
}

pub fn energy_report(traj: &Trajectory) -> EnergyReport {
    let dt = traj.dt();
    let e0 = 0.5 * traj.grid.inner(&traj.initial, &traj.initial);
    let mut dissipated = 0.0;
    let mut work = 0.0;
    let mut f_sq = 0.0;
    let mut scale = e0.max(1.0);
    let mut residuals = Vec::with_capacity(traj.len());
    for d in &traj.diagnostics {
        dissipated += dt * d.dissipation;
        work += dt * d.forcing_power;
        f_sq += dt * d.forcing_sq;
        scale = scale.max(d.energy).max(work.abs());
        residuals.push(d.energy + dissipated - work - e0);
    }
    let max_residual = residuals
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let t = traj.final_time();
    EnergyReport {
        max_residual,
        residuals,
        scale,
        linf_l2: traj.linf_l2_norm(),
        gronwall_bound: (0.5 * t).exp() * (f_sq + 2.0 * e0).sqrt(),
    }
}

/// Implicit solver bound to one grid and configuration.
#[derive(Debug, Clone)]
pub struct Stepper {
    pub grid: Grid,
    pub config: SolverConfig,
    curl_t: Csr,
    kl: usize,
    ku: usize,
    stream_gram: BandedLu,
}

/// Viscosity state at one inner iterate.
struct Linearization {
    /// `G R psi`: cell D11, cell D22, corner D12.
    sg: Vec<f64>,
    eta: ScalarField,
    /// `d eta / d |Du|^2` per cell.
    slope: Vec<f64>,
    weights: Vec<f64>,
}

/// Banded solves that reuse the last factorization as a preconditioner.
#[derive(Default)]
struct LinearSolves {
    lu: Option<BandedLu>,
    refresh: bool,
}

/// BiCGSTAB iteration count above which the next solve refactors.
const REFRESH_AFTER: usize = 3;

impl LinearSolves {
    fn solve(&mut self, m: &Banded, rhs: &[f64], x0: &[f64]) -> Result<Vec<f64>> {
        if let Some(stale) = self.lu.as_ref().filter(|_| !self.refresh) {
            let mut x = x0.to_vec();
            let r = bicgstab(|v| m.matvec(v), |v| stale.solve(v), rhs, &mut x, 1e-12, 20);
            if let Ok(c) = r {
                self.refresh = c.iterations > REFRESH_AFTER;
                return Ok(x);
            }
        }
        let fresh = m.clone().factor()?;
        let x = fresh.solve(rhs);
        self.lu = Some(fresh);
        self.refresh = false;
        Ok(x)
    }
}

/// Rows of the strain matrix belonging to cell `(i, j)`: D11, D22 and the
/// four corner D12 rows.
fn cell_rows(d: &Domain, i: usize, j: usize) -> [usize; 6] {
    let nc = d.n_cells();
    [
        d.cell(i, j),
        nc + d.cell(i, j),
        2 * nc + d.corner(i, j),
        2 * nc + d.corner(i + 1, j),
        2 * nc + d.corner(i, j + 1),
        2 * nc + d.corner(i + 1, j + 1),
    ]
}

fn accumulate(acc: &mut Vec<(usize, f64)>, col: usize, v: f64) {
    match acc.iter_mut().find(|(c, _)| *c == col) {
        Some((_, a)) => *a += v,
        None => acc.push((col, v)),
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Stepper {
    pub fn new(grid: Grid, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let d = grid.domain;
        let curl = grid.curl_matrix();
        let curl_t = curl.transpose();
        let sgc = grid.sym_grad_curl_matrix();
        let probe =
            grid.convection_operator(&VelocityField::from_fn(&d, |x, y| (1.0 + x, 1.0 + y)));
        let (mut kl, mut ku) = curl_t.matmul(&probe.matmul(curl)).bandwidths();
        for j in 0..d.ny {
            for i in 0..d.nx {
                let cols: Vec<usize> = cell_rows(&d, i, j)
                    .iter()
                    .flat_map(|&r| sgc.row(r).map(|(c, _)| c))
                    .collect();
                if let (Some(lo), Some(hi)) = (cols.iter().min(), cols.iter().max()) {
                    kl = kl.max(hi - lo);
                    ku = ku.max(hi - lo);
                }
            }
        }
        let mut gram = Banded::zeros(d.n_stream(), kl, ku);
        gram.add_weighted_gram(curl, &vec![1.0; d.n_faces()]);
        let stream_gram = gram.factor()?;
        Ok(Self {
            grid,
            config,
            curl_t,
            kl,
            ku,
            stream_gram,
        })
    }

    fn div_tol(&self, u: &VelocityField) -> f64 {
        self.config.div_tol_factor * u.linf().max(1e-300) / self.grid.h()
    }

    /// Total viscosity `nu + k_eps(|Du|^2 - psi^2) + eps |Du|^(q-2)` and the
    /// multiplier part `k_eps(...)`.
    fn viscosity(&self, du: &ScalarField, psi: &ScalarField) -> (ScalarField, ScalarField) {
        let p = &self.config.penalty;
        let lam = penalty_viscosity(du, psi, p);
        let qv = q_viscosity(du, p);
        let nu = self.config.nu;
        let eta = lam.zip_map(&qv, |a, b| nu + a + b);
        (eta, lam)
    }

    fn linearize(&self, stream: &[f64], psi: &ScalarField) -> Linearization {
        let d = self.grid.domain;
        let p = &self.config.penalty;
        let sg = self.grid.sym_grad_curl_matrix().matvec(stream);
        let nc = d.n_cells();
        let mut eta = ScalarField::zeros(&d);
        let mut slope = vec![0.0; nc];
        let e = p.q as i32;
        for j in 0..d.ny {
            for i in 0..d.nx {
                let r = cell_rows(&d, i, j);
                let d12 = 0.25 * (sg[r[2]] + sg[r[3]] + sg[r[4]] + sg[r[5]]);
                let s = sg[r[0]] * sg[r[0]] + sg[r[1]] * sg[r[1]] + 2.0 * d12 * d12;
                let g = s.sqrt();
                let c = d.cell(i, j);
                let excess = s - psi.data[c] * psi.data[c];
                eta.data[c] = self.config.nu + k_eps(excess, p) + p.eps * g.powi(e - 2);
                slope[c] = k_eps_prime(excess, p) + 0.5 * p.eps * (e - 2) as f64 * g.powi(e - 4);
            }
        }
        let weights = self.grid.viscous_weights(&eta);
        Linearization {
            sg,
            eta,
            slope,
            weights,
        }
    }

    /// `A(psi) psi - rhs` of the nonlinear stream-function system.
    fn residual(
        &self,
        base: &Banded,
        lin: &Linearization,
        stream: &[f64],
        rhs: &[f64],
    ) -> Vec<f64> {
        let sgc = self.grid.sym_grad_curl_matrix();
        let scaled: Vec<f64> = lin
            .sg
            .iter()
            .zip(&lin.weights)
            .map(|(g, w)| g * w)
            .collect();
        let visc = sgc.matvec_transpose(&scaled);
        let mut r = base.matvec(stream);
        r.iter_mut()
            .zip(visc.iter().zip(rhs))
            .for_each(|(r, (v, b))| *r += v - b);
        r
    }

    fn picard_matrix(&self, base: &Banded, lin: &Linearization) -> Banded {
        let mut m = base.clone();
        m.add_weighted_gram(self.grid.sym_grad_curl_matrix(), &lin.weights);
        m
    }

    /// Picard matrix plus the derivative of the viscosity with respect to
    /// the strain.
    fn jacobian(&self, base: &Banded, lin: &Linearization) -> Banded {
        let d = self.grid.domain;
        let sgc = self.grid.sym_grad_curl_matrix();
        let mut m = self.picard_matrix(base, lin);
        let mut pv = Vec::with_capacity(24);
        let mut qv = Vec::with_capacity(24);
        for j in 0..d.ny {
            for i in 0..d.nx {
                let c = d.cell(i, j);
                let slope = lin.slope[c];
                if slope == 0.0 {
                    continue;
                }
                let r = cell_rows(&d, i, j);
                let sg = &lin.sg;
                let d12 = 0.25 * (sg[r[2]] + sg[r[3]] + sg[r[4]] + sg[r[5]]);
                let a = [
                    sg[r[0]],
                    sg[r[1]],
                    0.5 * sg[r[2]],
                    0.5 * sg[r[3]],
                    0.5 * sg[r[4]],
                    0.5 * sg[r[5]],
                ];
                let b = [2.0 * sg[r[0]], 2.0 * sg[r[1]], d12, d12, d12, d12];
                pv.clear();
                qv.clear();
                for k in 0..6 {
                    for (col, v) in sgc.row(r[k]) {
                        accumulate(&mut pv, col, a[k] * v);
                        accumulate(&mut qv, col, b[k] * v);
                    }
                }
                for &(ca, va) in &pv {
                    for &(cb, vb) in &qv {
                        m.add(ca, cb, slope * va * vb);
                    }
                }
            }
        }
        m
    }

    /// One implicit step to `state.t + dt` with threshold `psi` and forcing
    /// `f` at the new time. `guess` seeds the inner iteration.
    pub fn step(
        &self,
        state: &FlowState,
        psi: &ScalarField,
        f: &VelocityField,
        guess: Option<&VelocityField>,
    ) -> Result<(FlowState, StepDiagnostics)> {
        self.step_reusing(state, psi, f, guess, &mut LinearSolves::default())
    }

    fn step_reusing(
        &self,
        state: &FlowState,
        psi: &ScalarField,
        f: &VelocityField,
        guess: Option<&VelocityField>,
        solves: &mut LinearSolves,
    ) -> Result<(FlowState, StepDiagnostics)> {
        let cfg = &self.config;
        match self.step_with(state, psi, f, guess, cfg.inner, cfg.relax, solves) {
            Err(Error::PicardDiverged { .. }) | Err(Error::LinearSolver { .. }) => {
                solves.lu = None;
                self.step_with(
                    state,
                    psi,
                    f,
                    guess,
                    InnerSolver::Picard,
                    0.5 * cfg.relax,
                    solves,
                )
            }
            other => other,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step_with(
        &self,
        state: &FlowState,
        psi: &ScalarField,
        f: &VelocityField,
        guess: Option<&VelocityField>,
        method: InnerSolver,
        relax: f64,
        solves: &mut LinearSolves,
    ) -> Result<(FlowState, StepDiagnostics)> {
        let grid = &self.grid;
        let d = grid.domain;
        let cfg = &self.config;
        let dt = cfg.dt;
        let t_new = state.t + dt;
        let curl = grid.curl_matrix();

        // R^T (I/dt + C(u^n)) R, with the convection skew-symmetrized exactly
        let conv = grid.convection_operator(&state.u);
        let conv_s = self.curl_t.matmul(&conv.matmul(curl));
        let mut base = Banded::zeros(d.n_stream(), self.kl, self.ku);
        base.add_weighted_gram(curl, &vec![1.0 / dt; d.n_faces()]);
        base.add_csr(&conv_s, 0.5);
        base.add_csr(&conv_s.transpose(), -0.5);

        let mut b = state.u.to_flat();
        b.iter_mut()
            .zip(f.to_flat())
            .for_each(|(b, f)| *b = *b / dt + f);
        let rhs = self.curl_t.matvec(&b);

        let mut stream = self.stream_of(guess.unwrap_or(&state.u));
        let mut lin = self.linearize(&stream, psi);
        let mut res = self.residual(&base, &lin, &stream, &rhs);

        let mut iters = 0;
        let mut converged = false;
        let mut prev_update = f64::INFINITY;
        let mut growth = 0;
        while iters < cfg.picard_max {
            iters += 1;
            let (delta, theta) = match method {
                InnerSolver::Picard => {
                    let m = self.picard_matrix(&base, &lin);
                    let next = solves.solve(&m, &rhs, &stream)?;
                    let delta: Vec<f64> = next.iter().zip(&stream).map(|(n, s)| n - s).collect();
                    (delta, relax)
                }
                InnerSolver::Newton => {
                    let m = self.jacobian(&base, &lin);
                    let neg: Vec<f64> = res.iter().map(|r| -r).collect();
                    let delta = solves.solve(&m, &neg, &vec![0.0; neg.len()])?;
                    (delta, 1.0)
                }
            };
            let r0 = l2(&res);
            let mut theta = theta;
            let (trial, trial_lin, trial_res) = loop {
                let trial: Vec<f64> = stream
                    .iter()
                    .zip(&delta)
                    .map(|(s, d)| s + theta * d)
                    .collect();
                let tl = self.linearize(&trial, psi);
                let tr = self.residual(&base, &tl, &trial, &rhs);
                let accept = method == InnerSolver::Picard
                    || l2(&tr) <= (1.0 - 1e-4 * theta) * r0
                    || theta <= 1.0 / 64.0;
                if accept {
                    break (trial, tl, tr);
                }
                theta *= 0.5;
            };
            let step_norm = theta * grid.norms(&grid.curl(&delta)).l2;
            let norm = grid.norms(&grid.curl(&trial)).l2;
            let update = if norm > 0.0 {
                step_norm / norm
            } else {
                step_norm
            };
            if !update.is_finite() {
                return Err(Error::PicardDiverged {
                    t: t_new,
                    iterations: iters,
                });
            }
            stream = trial;
            lin = trial_lin;
            res = trial_res;
            if update < cfg.picard_tol {
                converged = true;
                break;
            }
            if update > prev_update {
                growth += 1;
                if growth >= 5 {
                    return Err(Error::PicardDiverged {
                        t: t_new,
                        iterations: iters,
                    });
                }
            } else {
                growth = 0;
            }
            prev_update = update;
        }

        // Accepted velocity: one unrelaxed solve with the final lagged viscosity.
        let eta = lin.eta.clone();
        let sol = solves.solve(&self.picard_matrix(&base, &lin), &rhs, &stream)?;
        let u = grid.curl(&sol);
        if !u.is_finite() {
            return Err(Error::PicardDiverged {
                t: t_new,
                iterations: iters,
            });
        }

        // pressure: grad p = b - K u, recovered by projection
        let ku = {
            let mut v = u.to_flat();
            v.iter_mut().for_each(|x| *x /= dt);
            let visc = grid.viscous_divergence(&eta, &u).to_flat();
            let c = conv.matvec(&u.to_flat());
            v.iter_mut()
                .zip(visc.iter().zip(&c))
                .for_each(|(x, (vi, ci))| *x += ci - vi);
            v
        };
        let resid: Vec<f64> = b.iter().zip(&ku).map(|(b, k)| b - k).collect();
        let (_, pressure) = grid.project(&VelocityField::from_flat(&d, &resid), 1.0)?;

        let du = grid.strain_norm(&u);
        let (_, lambda) = self.viscosity(&du, psi);
        let diag = self.diagnostics(t_new, &u, &du, psi, &lambda, f, iters, converged, relax);
        if diag.div_residual > self.div_tol(&u) && u.linf() > 0.0 {
            return Err(Error::InvalidParameter {
                name: "div_tol",
                reason: format!("divergence {} above tolerance", diag.div_residual),
            });
        }
        Ok((
            FlowState {
                t: t_new,
                u,
                pressure,
                lambda,
            },
            diag,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn diagnostics(
        &self,
        t: f64,
        u: &VelocityField,
        du: &ScalarField,
        psi: &ScalarField,
        lambda: &ScalarField,
        f: &VelocityField,
        picard_iters: usize,
        picard_converged: bool,
        relax: f64,
    ) -> StepDiagnostics {
        let grid = &self.grid;
        let h = grid.h();
        let excess = du
            .data
            .iter()
            .zip(&psi.data)
            .map(|(g, s)| (g - s).max(0.0))
            .fold(0.0, f64::max);
        let mass = lambda.integral(h);
        let slack: f64 = lambda
            .data
            .iter()
            .zip(du.data.iter().zip(&psi.data))
            .map(|(l, (g, s))| l * (s - g).max(0.0))
            .sum::<f64>()
            * h
            * h;
        StepDiagnostics {
            t,
            energy: 0.5 * grid.inner(u, u),
            dissipation: self.config.nu * du.inner(du, h),
            constraint_excess: excess,
            complementarity: slack / mass.max(1e-30),
            multiplier_mass: mass,
            picard_iters,
            picard_converged,
            relax,
            div_residual: grid.divergence(u).max_abs(),
            forcing_power: grid.inner(f, u),
            forcing_sq: grid.inner(f, f),
        }
    }

    /// Stream function of a divergence-free field, by least squares on the
    /// curl basis.
    fn stream_of(&self, u: &VelocityField) -> Vec<f64> {
        if u.linf() == 0.0 {
            return vec![0.0; self.grid.domain.n_stream()];
        }
        self.stream_gram.solve(&self.curl_t.matvec(&u.to_flat()))
    }

    /// Runs from `u0` to `t_end`. Functional thresholds read `reference`;
    /// `warm` supplies Picard starting guesses step by step.
    pub fn run(
        &self,
        u0: &VelocityField,
        psi: &ThresholdProvider,
        f: &ForceProvider,
        reference: Option<&Trajectory>,
        warm: Option<&Trajectory>,
    ) -> Result<Trajectory> {
        let grid = &self.grid;
        let d = grid.domain;
        let div0 = grid.divergence(u0).max_abs();
        if div0 > self.div_tol(u0) && u0.linf() > 0.0 {
            return Err(Error::InvalidParameter {
                name: "u0",
                reason: format!("initial velocity is not divergence-free (max |div| = {div0:.3e})"),
            });
        }
        let prepared = psi.prepare(&d, reference)?;
        let psi0 = prepared.eval(0.0)?;
        let du0 = grid.strain_norm(u0);
        for j in 0..d.ny {
            for i in 0..d.nx {
                let (g, s) = (du0.get(i, j), psi0.get(i, j));
                if g > s * (1.0 + 1e-12) {
                    return Err(Error::InitialConstraintViolated {
                        i,
                        j,
                        value: g,
                        psi: s,
                    });
                }
            }
        }
        let steps = self.config.steps();
        let mut state = FlowState {
            t: 0.0,
            u: u0.clone(),
            pressure: ScalarField::zeros(&d),
            lambda: ScalarField::zeros(&d),
        };
        let mut traj = Trajectory {
            grid: grid.clone(),
            config: self.config,
            initial: u0.clone(),
            states: Vec::with_capacity(steps),
            psi: Vec::with_capacity(steps),
            diagnostics: Vec::with_capacity(steps),
        };
        let mut solves = LinearSolves::default();
        for k in 0..steps {
            let t = (k + 1) as f64 * self.config.dt;
            let psi_k = prepared.eval(t)?;
            let f_k = f.sample(&d, t);
            let guess = warm.and_then(|w| w.states.get(k)).map(|s| &s.u);
            let (next, diag) = self.step_reusing(&state, &psi_k, &f_k, guess, &mut solves)?;
            traj.states.push(next.clone());
            traj.psi.push(psi_k);
            traj.diagnostics.push(diag);
            state = next;
        }
        Ok(traj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::ThresholdBounds;

    fn setup(n: usize, nu: f64, eps: f64, steps: usize) -> Stepper {
        let d = Domain::unit_square(n).unwrap();
        let dt = SolverConfig::default_dt(d.h, 1.0);
        let cfg = SolverConfig::new(
            nu,
            dt,
            dt * steps as f64,
            PenaltyParams::with_eps(eps).unwrap(),
        )
        .unwrap();
        Stepper::new(Grid::new(d), cfg).unwrap()
    }

    fn mode(d: &Domain, amp: f64) -> VelocityField {
        // curl of amp * sin^2(pi x) sin^2(pi y) sampled through the discrete curl
        let g = Grid::new(*d);
        let n = d.nx - 1;
        let mut stream = vec![0.0; d.n_stream()];
        for j in 0..d.ny - 1 {
            for i in 0..n {
                let (x, y) = ((i + 1) as f64 * d.h, (j + 1) as f64 * d.h);
                let s = (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin();
                stream[j * n + i] = amp * s * s;
            }
        }
        g.curl(&stream)
    }

    fn lid(amp: f64) -> ForceProvider {
        ForceProvider::analytic(&format!("{amp}*sin(pi*x)*exp(-8*(1-y))"), "0").unwrap()
    }

    #[test]
    fn config_validation() {
        let p = PenaltyParams::with_eps(0.2).unwrap();
        assert!(SolverConfig::new(0.1, 0.0, 1.0, p).is_err());
        assert!(SolverConfig::new(0.1, 0.1, 0.05, p).is_err());
        assert!(SolverConfig::new(-0.1, 0.1, 1.0, p).is_err());
        let mut c = SolverConfig::new(0.1, 0.1, 1.0, p).unwrap();
        assert_eq!(c.steps(), 10);
        c.relax = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(SolverConfig::default_dt(0.1, 4.0), 0.1 / 16.0);
        assert_eq!(SolverConfig::default_dt(0.1, 0.2), 0.1 / 4.0);
    }

    #[test]
    fn zero_data_gives_zero_trajectory() {
        let st = setup(8, 0.1, 0.2, 5);
        let d = st.grid.domain;
        let psi = ThresholdProvider::constant(1.0).unwrap();
        let tr = st
            .run(
                &VelocityField::zeros(&d),
                &psi,
                &ForceProvider::Zero,
                None,
                None,
            )
            .unwrap();
        assert_eq!(tr.len(), 5);
        for (s, diag) in tr.states.iter().zip(&tr.diagnostics) {
            assert_eq!(s.u.linf(), 0.0);
            assert_eq!(diag.energy, 0.0);
            assert_eq!(s.lambda.max_abs(), 0.0);
            assert!(diag.picard_converged);
        }
        let rep = energy_report(&tr);
        assert_eq!(rep.max_residual, 0.0);
    }

    #[test]
    fn pure_decay_dissipates_every_step() {
        let st = setup(12, 1.0, 0.2, 8);
        let d = st.grid.domain;
        let u0 = mode(&d, 0.02);
        let psi = ThresholdProvider::constant(1.0).unwrap();
        let tr = st.run(&u0, &psi, &ForceProvider::Zero, None, None).unwrap();
        let mut prev = 0.5 * st.grid.inner(&u0, &u0);
        for (s, diag) in tr.states.iter().zip(&tr.diagnostics) {
            assert!(diag.energy < prev);
            prev = diag.energy;
            assert_eq!(s.lambda.max_abs(), 0.0);
            assert_eq!(diag.multiplier_mass, 0.0);
        }
        let rep = energy_report(&tr);
        assert!(rep.residuals.iter().all(|&r| r <= 0.0));
    }

    #[test]
    fn forced_active_run_keeps_energy_balance() {
        let st = setup(16, 0.1, 0.15, 30);
        let d = st.grid.domain;
        let psi = ThresholdProvider::constant(1.0).unwrap();
        let tr = st
            .run(&VelocityField::zeros(&d), &psi, &lid(20.0), None, None)
            .unwrap();
        assert!(
            tr.diagnostics.iter().any(|d| d.multiplier_mass > 0.0),
            "constraint never active"
        );
        assert!(tr.diagnostics.iter().all(|d| d.picard_converged));
        let rep = energy_report(&tr);
        assert!(
            rep.holds(1e-8),
            "residual {} scale {}",
            rep.max_residual,
            rep.scale
        );
        assert!(rep.gronwall_holds(1.05));
        for diag in &tr.diagnostics {
            assert!(diag.div_residual < 1e-10);
            assert!(diag.complementarity <= 1e-12);
            assert!(diag.constraint_excess >= 0.0);
        }
    }

    #[test]
    fn inner_solvers_agree() {
        let psi = ThresholdProvider::constant(1.0).unwrap();
        let mut runs = Vec::new();
        for inner in [InnerSolver::Newton, InnerSolver::Picard] {
            let mut st = setup(12, 0.5, 0.3, 6);
            st.config.inner = inner;
            st.config.picard_tol = 1e-10;
            st.config.picard_max = 200;
            let d = st.grid.domain;
            runs.push(
                st.run(&VelocityField::zeros(&d), &psi, &lid(4.0), None, None)
                    .unwrap(),
            );
        }
        let diff = runs[0].l2_distance(&runs[1]).unwrap();
        let size = runs[0].states.last().unwrap().u.linf();
        assert!(size > 0.0);
        assert!(diff < 1e-7 * size.max(1.0), "{diff}");
        let newton: usize = runs[0].diagnostics.iter().map(|d| d.picard_iters).sum();
        let picard: usize = runs[1].diagnostics.iter().map(|d| d.picard_iters).sum();
        assert!(newton <= picard);
    }

    #[test]
    fn inviscid_run_stays_finite() {
        let st = setup(12, 0.0, 0.2, 20);
        let d = st.grid.domain;
        let psi = ThresholdProvider::constant(1.0).unwrap();
        let tr = st
            .run(&VelocityField::zeros(&d), &psi, &lid(15.0), None, None)
            .unwrap();
        assert!(tr.states.iter().all(|s| s.u.is_finite()));
        assert!(tr.diagnostics.iter().all(|d| d.dissipation == 0.0));
        let rep = energy_report(&tr);
        assert!(rep.holds(1e-8));
        assert!(rep.gronwall_holds(1.05));
    }

    #[test]
    fn gradient_forcing_is_absorbed_by_pressure() {
        let st = setup(10, 0.1, 0.2, 2);
        let d = st.grid.domain;
        let f = ForceProvider::analytic("2*x", "2*y").unwrap();
        let psi = ThresholdProvider::constant(1.0).unwrap();
        let tr = st
            .run(&VelocityField::zeros(&d), &psi, &f, None, None)
            .unwrap();
        let s = tr.states.last().unwrap();
        assert!(s.u.linf() < 1e-12);
        let exact = ScalarField::from_fn(&d, |x, y| x * x + y * y);
        let mean = exact.integral(d.h) / d.area();
        let pmean = s.pressure.integral(d.h) / d.area();
        for k in 0..d.n_cells() {
            assert!((s.pressure.data[k] - pmean - (exact.data[k] - mean)).abs() < 1e-9);
        }
    }

    #[test]
    fn initial_state_must_satisfy_constraint() {
        let st = setup(12, 0.1, 0.2, 2);
        let d = st.grid.domain;
        let u0 = mode(&d, 1.0);
        let psi = ThresholdProvider::new(
            crate::constraints::ThresholdSource::Constant(0.5),
            ThresholdBounds::new(0.5, 0.5).unwrap(),
        );
        match st.run(&u0, &psi, &ForceProvider::Zero, None, None) {
            Err(Error::InitialConstraintViolated { value, psi, .. }) => assert!(value > psi),
            other => panic!("{other:?}"),
        }
        let bad = VelocityField::from_fn(&d, |x, _| (x, 0.0));
        assert!(matches!(
            st.run(
                &bad,
                &ThresholdProvider::constant(10.0).unwrap(),
                &ForceProvider::Zero,
                None,
                None
            ),
            Err(Error::InvalidParameter { name: "u0", .. })
        ));
    }

    #[test]
    fn trajectory_distances() {
        let st = setup(8, 0.5, 0.3, 3);
        let d = st.grid.domain;
        let psi = ThresholdProvider::constant(1.0).unwrap();
        let a = st
            .run(&VelocityField::zeros(&d), &psi, &lid(2.0), None, None)
            .unwrap();
        let b = st
            .run(
                &VelocityField::zeros(&d),
                &psi,
                &ForceProvider::Zero,
                None,
                None,
            )
            .unwrap();
        assert_eq!(a.v2_distance(&a).unwrap(), 0.0);
        assert!((a.v2_distance(&b).unwrap() - a.v2_norm()).abs() < 1e-14);
        assert!(a.linf_l2_distance_sq(&b).unwrap() > 0.0);
        let short = setup(8, 0.5, 0.3, 2)
            .run(
                &VelocityField::zeros(&d),
                &psi,
                &ForceProvider::Zero,
                None,
                None,
            )
            .unwrap();
        assert!(matches!(
            a.l2_distance(&short),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
