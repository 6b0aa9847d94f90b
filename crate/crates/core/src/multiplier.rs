//! The multiplier `lambda ~ k_eps(|Du|^2 - psi^2)` of the penalized solution
//! and the residuals of the complementarity system it satisfies in the limit.

use serde::Serialize;

use crate::grid::{Domain, Grid, ScalarField};
use crate::penalty::{penalty_viscosity, PenaltyParams};
use crate::stepper::{ForceProvider, Trajectory};

/// Time-indexed cell multiplier, `lambda >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierField {
    pub times: Vec<f64>,
    pub lambda: Vec<ScalarField>,
}

impl MultiplierField {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            times: traj.states.iter().map(|s| s.t).collect(),
            lambda: traj.states.iter().map(|s| s.lambda.clone()).collect(),
        }
    }

    /// `sum_steps int lambda dt`.
    pub fn total_mass(&self, h: f64, dt: f64) -> f64 {
        self.lambda.iter().map(|l| l.integral(h) * dt).sum()
    }
}

/// `k_eps(|Du|^2 - psi^2)` per cell.
pub fn extract(du_norm: &ScalarField, psi: &ScalarField, p: &PenaltyParams) -> ScalarField {
    penalty_viscosity(du_norm, psi, p)
}

/// `sum lambda (psi - |Du|)_+ / max(sum lambda, 1e-30)` over cells and steps.
pub fn complementarity_residual(
    lam: &MultiplierField,
    du_norm: &[ScalarField],
    psi: &[ScalarField],
) -> f64 {
    let mut slack = 0.0;
    let mut mass = 0.0;
    for ((l, g), s) in lam.lambda.iter().zip(du_norm).zip(psi) {
        for k in 0..l.data.len() {
            slack += l.data[k] * (s.data[k] - g.data[k]).max(0.0);
            mass += l.data[k];
        }
    }
    slack / mass.max(1e-30)
}

/// Space-time complementarity residual of a trajectory.
pub fn trajectory_complementarity(traj: &Trajectory) -> f64 {
    let du: Vec<_> = traj
        .states
        .iter()
        .map(|s| traj.grid.strain_norm(&s.u))
        .collect();
    complementarity_residual(&MultiplierField::from_trajectory(traj), &du, &traj.psi)
}

/// Fraction of the multiplier mass on cells with `|Du| >= psi - band`.
pub fn mass_concentration(traj: &Trajectory, band: f64) -> f64 {
    let mut near = 0.0;
    let mut total = 0.0;
    for (s, psi) in traj.states.iter().zip(&traj.psi) {
        let du = traj.grid.strain_norm(&s.u);
        for k in 0..du.data.len() {
            let l = s.lambda.data[k];
            total += l;
            if du.data[k] >= psi.data[k] - band {
                near += l;
            }
        }
    }
    if total == 0.0 {
        1.0
    } else {
        near / total
    }
}

/// Mode numbers `(m, n)` of the test fields `curl(sin^2(m pi x/lx) sin^2(n pi y/ly))`.
pub const TEST_MODES: [(u32, u32); 8] = [
    (1, 1),
    (1, 2),
    (2, 1),
    (2, 2),
    (1, 3),
    (3, 1),
    (2, 3),
    (3, 2),
];

/// Divergence-free test field with vanishing trace and its gradient at a point.
#[derive(Debug, Clone, Copy)]
pub struct TestField {
    a: f64,
    b: f64,
}

/// Value `(v1, v2)` and gradient `[[dv1/dx, dv1/dy], [dv2/dx, dv2/dy]]`.
pub type FieldSample = ([f64; 2], [[f64; 2]; 2]);

impl TestField {
    pub fn new(d: &Domain, m: u32, n: u32) -> Self {
        Self {
            a: m as f64 * std::f64::consts::PI / d.lx,
            b: n as f64 * std::f64::consts::PI / d.ly,
        }
    }

    /// Stream function `s(x) t(y)` with `s = sin^2(a x)`, `t = sin^2(b y)`;
    /// `v = (s t', -s' t)`.
    pub fn sample(&self, x: f64, y: f64) -> FieldSample {
        let (a, b) = (self.a, self.b);
        let s = (a * x).sin().powi(2);
        let s1 = a * (2.0 * a * x).sin();
        let s2 = 2.0 * a * a * (2.0 * a * x).cos();
        let t = (b * y).sin().powi(2);
        let t1 = b * (2.0 * b * y).sin();
        let t2 = 2.0 * b * b * (2.0 * b * y).cos();
        ([s * t1, -s1 * t], [[s1 * t1, s * t2], [-s2 * t, -s1 * t1]])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentumResidual {
    /// `sum_n dt |R_n(v)| / |v|` per test field.
    pub per_field: Vec<f64>,
    pub max: f64,
}

/// Discrete weak residual of
/// `int d_t u . v + (nu + lambda + eps |Du|^(q-2)) Du : Dv - (u (x) u) : grad v - f . v`
/// over the test battery, by cell-centre quadrature; the transport uses the
/// previous velocity as in the scheme.
pub fn momentum_residual(traj: &Trajectory, f: &ForceProvider) -> MomentumResidual {
    let grid: &Grid = &traj.grid;
    let d = grid.domain;
    let cfg = &traj.config;
    let dt = traj.dt();
    let area = d.h * d.h;
    let fields: Vec<TestField> = TEST_MODES
        .iter()
        .map(|&(m, n)| TestField::new(&d, m, n))
        .collect();
    let samples: Vec<Vec<FieldSample>> = fields
        .iter()
        .map(|tf| {
            (0..d.n_cells())
                .map(|c| {
                    let (x, y) = d.cell_center(c % d.nx, c / d.nx);
                    tf.sample(x, y)
                })
                .collect()
        })
        .collect();
    let norms: Vec<f64> = samples
        .iter()
        .map(|s| {
            (s.iter()
                .map(|(v, _)| v[0] * v[0] + v[1] * v[1])
                .sum::<f64>()
                * area)
                .sqrt()
        })
        .collect();

    let mut totals = vec![0.0; fields.len()];
    let mut prev = traj.initial.cell_centered();
    for state in &traj.states {
        let cur = state.u.cell_centered();
        let du = grid.sym_gradient(&state.u);
        let g = crate::grid::tensor_norm(&du);
        let qexp = cfg.penalty.q as i32 - 2;
        let mut step = vec![0.0; fields.len()];
        for c in 0..d.n_cells() {
            let (x, y) = d.cell_center(c % d.nx, c / d.nx);
            let (fx, fy) = f.value(x, y, state.t);
            let eta = cfg.nu + state.lambda.data[c] + cfg.penalty.eps * g.data[c].powi(qexp);
            let (u_new, u_old) = (
                [cur.0.data[c], cur.1.data[c]],
                [prev.0.data[c], prev.1.data[c]],
            );
            let (d11, d12, d22) = (du.xx.data[c], du.xy.data[c], du.yy.data[c]);
            for (k, s) in samples.iter().enumerate() {
                let (v, gv) = s[c];
                let dv12 = 0.5 * (gv[0][1] + gv[1][0]);
                let time = ((u_new[0] - u_old[0]) * v[0] + (u_new[1] - u_old[1]) * v[1]) / dt;
                let visc = eta * (d11 * gv[0][0] + d22 * gv[1][1] + 2.0 * d12 * dv12);
                let mut conv = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        conv += u_new[i] * u_old[j] * gv[i][j];
                    }
                }
                step[k] += (time + visc - conv - fx * v[0] - fy * v[1]) * area;
            }
        }
        for k in 0..fields.len() {
            totals[k] += dt * step[k].abs();
        }
        prev = cur;
    }
    let per_field: Vec<f64> = totals.iter().zip(&norms).map(|(t, n)| t / n).collect();
    let max = per_field.iter().copied().fold(0.0, f64::max);
    MomentumResidual { per_field, max }
}
