//! Quasi-variational layer: the fixed point `v -> S(f, u0, Psi[v])`, the
//! explicit constants certifying that this map contracts, and the
//! continuous-dependence bound for given thresholds.

use serde::Serialize;

use crate::constraints::{NormFunctional, ThresholdProvider};
use crate::error::{Error, Result};
use crate::grid::VelocityField;
use crate::stepper::{ForceProvider, Stepper, Trajectory};

/// Safety factor applied to a measured sup norm.
pub const PILOT_SAFETY: f64 = 1.2;

/// Source of the velocity sup-norm bound `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SupNormBound {
    /// `M = K_p psi^* |Omega|^(1/p)` with a Korn-Sobolev constant `K_p`, `p > d`.
    Korn { k_p: f64, p: f64 },
    /// Largest velocity of a pilot run; multiplied by [`PILOT_SAFETY`].
    Pilot { measured: f64 },
}

/// Data entering the constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetData {
    pub nu: f64,
    pub t_end: f64,
    pub area: f64,
    pub dim: usize,
    /// First Dirichlet eigenvalue of the Laplacian, `pi^2 (1/lx^2 + 1/ly^2)`
    /// on a rectangle.
    pub kappa: f64,
    pub psi_star: f64,
    pub psi_upper: f64,
    /// `|f_1|_{L2(Q_T)}` and `|f_2|_{L2(Q_T)}`.
    pub f1_l2: f64,
    pub f2_l2: f64,
    pub u0_l2: f64,
    pub sup_bound: Option<SupNormBound>,
}

impl BudgetData {
    /// Poincare constant of the rectangle `[0, lx] x [0, ly]`.
    pub fn rectangle_kappa(lx: f64, ly: f64) -> f64 {
        std::f64::consts::PI.powi(2) * (1.0 / (lx * lx) + 1.0 / (ly * ly))
    }
}

/// Bounds `eta(R) <= Gamma <= rho(R)` and Lipschitz constant `gamma(R)` of
/// the scalar factor of `Psi[w] = Gamma(w) phi`, evaluated at a radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaData {
    pub gamma: f64,
    pub eta: f64,
    pub rho: f64,
    /// `phi^*`, the upper bound of the spatial factor.
    pub phi_upper: f64,
}

impl GammaData {
    /// `Gamma = 1`: a threshold that does not depend on the solution.
    pub fn constant(phi_upper: f64) -> Self {
        Self {
            gamma: 0.0,
            eta: 1.0,
            rho: 1.0,
            phi_upper,
        }
    }

    /// `Gamma(w) = alpha + beta |Dw|^2` on the ball of radius `r`.
    pub fn norm_functional(nf: &NormFunctional, phi_upper: f64, r: f64) -> Self {
        Self {
            gamma: 2.0 * nf.beta * r,
            eta: nf.alpha,
            rho: nf.alpha + nf.beta * r * r,
            phi_upper,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionBudget {
    pub data: BudgetData,
    /// Sup-norm bound for the given threshold bounds.
    pub m: f64,
    /// Sup-norm bound for `psi^* = rho_* phi^*`.
    pub m_star: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c_star: f64,
    pub c_nu: f64,
    pub r1: f64,
    pub r2: f64,
    pub r_star: f64,
    pub a: f64,
    pub b: f64,
    pub gamma_star: f64,
    pub eta_star: f64,
    pub rho_star: f64,
    pub phi_upper: f64,
}

/// Evaluates every constant in closed form. `gamma` maps a radius to the
/// functional's bounds there.
pub fn compute_budget(
    data: &BudgetData,
    gamma: impl Fn(f64) -> GammaData,
) -> Result<ContractionBudget> {
    let BudgetData {
        nu,
        t_end: t,
        area,
        dim,
        kappa,
        psi_star,
        psi_upper,
        f1_l2,
        f2_l2,
        u0_l2,
        sup_bound,
    } = *data;
    if !(nu > 0.0) {
        return Err(Error::InvalidParameter {
            name: "nu",
            reason: format!("the contraction budget needs nu > 0, got {nu}"),
        });
    }
    if !(psi_star > 0.0 && psi_star <= psi_upper) || !(t > 0.0) || !(area > 0.0) || !(kappa > 0.0) {
        return Err(Error::InvalidParameter {
            name: "budget",
            reason: "need 0 < psi_star <= psi_upper and positive T, |Omega|, kappa".into(),
        });
    }
    let d = dim as f64;
    let sup = |psi_upper: f64| match sup_bound {
        Some(SupNormBound::Korn { k_p, p }) => Ok(k_p * psi_upper * area.powf(1.0 / p)),
        Some(SupNormBound::Pilot { measured }) => Ok(PILOT_SAFETY * measured),
        None => Err(Error::MissingKorn),
    };
    let m = sup(psi_upper)?;
    let c1 = (2.0 * m * m * area
        + 2.0 * nu * d * t * area * psi_upper * psi_upper
        + m * (t * area).sqrt() * (f1_l2 + f2_l2))
        / psi_star;
    let c2 = 2.0 * d * m * 2f64.sqrt() * area * t * psi_upper / psi_star;
    let c3 = d * m * m / 2.0;
    let c_star = 2.0 * (c1 + c2);
    let c_nu = 1.0 + 2.0 * c3 / nu;

    let data_sq = f1_l2 * f1_l2 + u0_l2 * u0_l2;
    let r1 = ((1.0 + t * t.exp()) / (2.0 * nu) * data_sq).sqrt();
    let r2 = (2.0 * f1_l2 * f1_l2 / (nu * nu * kappa) + u0_l2 * u0_l2 / nu).sqrt();
    let r_star = r1.min(r2);

    let g = gamma(r_star);
    let m_star = sup(g.rho * g.phi_upper)?;
    let a = f1_l2 * f1_l2
        + 4.0 * d * d * m_star.powi(4) * g.rho * g.rho / (nu * g.eta * g.eta) * t * area;
    let b = 1.0 + 4.0 * d / nu * m_star * m_star;
    Ok(ContractionBudget {
        data: *data,
        m,
        m_star,
        c1,
        c2,
        c3,
        c_star,
        c_nu,
        r1,
        r2,
        r_star,
        a,
        b,
        gamma_star: g.gamma,
        eta_star: g.eta,
        rho_star: g.rho,
        phi_upper: g.phi_upper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionCheck {
    pub holds: bool,
    /// `gamma_*/(eta_* sqrt(nu)) [sqrt(nu) R_* + ((e^(BT) - 1)(A + |u0|^2) + A)^(1/2)]`.
    pub lhs: f64,
    /// `1 - lhs`.
    pub margin: f64,
}

pub fn contraction_holds(b: &ContractionBudget) -> ContractionCheck {
    let nu = b.data.nu;
    let t = b.data.t_end;
    let u0 = b.data.u0_l2;
    let inner = (b.b * t).exp_m1() * (b.a + u0 * u0) + b.a;
    let lhs = if b.gamma_star == 0.0 {
        0.0
    } else {
        b.gamma_star / (b.eta_star * nu.sqrt()) * (nu.sqrt() * b.r_star + inner.sqrt())
    };
    ContractionCheck {
        holds: lhs < 1.0,
        lhs,
        margin: 1.0 - lhs,
    }
}

/// Right-hand sides of the continuous-dependence estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DependenceBound {
    /// Bound on `|u1 - u2|^2_{L-inf(L2)}`.
    pub linf_l2: f64,
    /// Bound on `|u1 - u2|^2_{L-inf(L2)} + nu |D(u1 - u2)|^2_{L2(Q_T)}`.
    pub with_dissipation: f64,
}

/// `e^(C_nu T) (|df|^2 + |du0|^2 + C_* |dpsi|_inf)` and the same data term
/// with factor `1 + C_nu T e^(C_nu T)`.
pub fn dependence_bound(
    df_l2: f64,
    du0_l2: f64,
    dpsi_inf: f64,
    b: &ContractionBudget,
) -> DependenceBound {
    let data = df_l2 * df_l2 + du0_l2 * du0_l2 + b.c_star * dpsi_inf;
    let e = (b.c_nu * b.data.t_end).exp();
    DependenceBound {
        linf_l2: e * data,
        with_dissipation: (1.0 + b.c_nu * b.data.t_end * e) * data,
    }
}

/// Record of the fixed-point iteration.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FixedPointHistory {
    /// `|v_(n+1) - v_n|` in the discrete `L2(Q_T)` norm of `Dv`.
    pub distances: Vec<f64>,
    /// Successive quotients of the distances.
    pub ratios: Vec<f64>,
    pub converged: bool,
    /// Whether the starting trajectory lay outside the a priori ball.
    pub start_outside_ball: bool,
    #[serde(skip)]
    pub final_trajectory: Option<Trajectory>,
}

impl FixedPointHistory {
    pub fn iterations(&self) -> usize {
        self.distances.len()
    }

    /// Least-squares slope of `log distance` against the iteration index,
    /// as a rate; `None` with fewer than two positive distances.
    pub fn geometric_rate(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .distances
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.0)
            .map(|(k, &d)| (k as f64, d.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some((sxy / sxx).exp())
    }
}

/// Stopping rule of [`fixed_point`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointSettings {
    /// Distance between consecutive iterates at which iteration stops.
    pub tol: f64,
    pub maxiter: usize,
    /// Radius of the a priori ball, to flag a starting point outside it.
    pub r_star: Option<f64>,
}

impl FixedPointSettings {
    pub fn new(tol: f64, maxiter: usize) -> Self {
        Self {
            tol,
            maxiter,
            r_star: None,
        }
    }
}

/// Iterates `v_(n+1) = S(f, u0, Psi[v_n])` from `v0` until the discrete
/// `V2` distance of consecutive iterates drops below `tol`. Each solve is
/// warm-started from the previous iterate.
pub fn fixed_point(
    stepper: &Stepper,
    u0: &VelocityField,
    psi: &ThresholdProvider,
    f: &ForceProvider,
    v0: &Trajectory,
    settings: FixedPointSettings,
) -> Result<FixedPointHistory> {
    let FixedPointSettings {
        tol,
        maxiter,
        r_star,
    } = settings;
    if !(stepper.config.nu > 0.0) {
        return Err(Error::InvalidParameter {
            name: "nu",
            reason: "the fixed-point iteration needs nu > 0".into(),
        });
    }
    let mut history = FixedPointHistory {
        start_outside_ball: r_star.is_some_and(|r| v0.v2_norm() > r),
        ..Default::default()
    };
    let mut prev = v0.clone();
    for _ in 0..maxiter {
        let next = stepper.run(u0, psi, f, Some(&prev), Some(&prev))?;
        let dist = next.v2_distance(&prev)?;
        if let Some(&last) = history.distances.last() {
            history
                .ratios
                .push(if last > 0.0 { dist / last } else { 0.0 });
        }
        history.distances.push(dist);
        prev = next;
        if dist < tol {
            history.converged = true;
            history.final_trajectory = Some(prev);
            return Ok(history);
        }
    }
    let last_distance = history.distances.last().copied().unwrap_or(f64::NAN);
    history.final_trajectory = Some(prev);
    Err(Error::NotConverged {
        maxiter,
        last_distance,
        history: Box::new(history),
    })
}
