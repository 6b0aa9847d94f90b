//! One-dimensional reference problem: gradient-constrained diffusion
//! `w_t - (nu w_x)_x = f`, `|w_x| <= psi`, `w = 0` at both ends, solved
//! once by direct projection and once through the penalty.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::penalty::{k_eps, k_eps_prime, PenaltyParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Oracle1DProblem {
    /// Grid points on `[0, 1]`, boundaries included.
    pub n: usize,
    pub nu: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Threshold on each of the `n - 1` edges.
    pub psi: Vec<f64>,
    /// Source at each node; boundary entries are ignored.
    pub f: Vec<f64>,
    /// Initial state at each node; vanishes at both ends.
    pub w0: Vec<f64>,
}

impl Oracle1DProblem {
    pub fn from_fns(
        n: usize,
        nu: f64,
        dt: f64,
        t_end: f64,
        psi: impl Fn(f64) -> f64,
        f: impl Fn(f64) -> f64,
        w0: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter {
                name: "n",
                reason: format!("need at least 8 points, got {n}"),
            });
        }
        let h = 1.0 / (n - 1) as f64;
        let mut w: Vec<f64> = (0..n).map(|i| w0(i as f64 * h)).collect();
        w[0] = 0.0;
        w[n - 1] = 0.0;
        let p = Self {
            n,
            nu,
            dt,
            t_end,
            psi: (0..n - 1).map(|e| psi((e as f64 + 0.5) * h)).collect(),
            f: (0..n).map(|i| f(i as f64 * h)).collect(),
            w0: w,
        };
        p.validate()?;
        Ok(p)
    }

    /// Constant source strong enough to activate the constraint near both
    /// walls, starting from rest.
    pub fn active_reference(n: usize) -> Result<Self> {
        let nu = 5.0;
        let t_end = 0.2;
        Self::from_fns(n, nu, t_end / 50.0, t_end, |_| 1.0, |_| 2.4 * nu, |_| 0.0)
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |name: &'static str, reason: String| Err(Error::InvalidParameter { name, reason });
        if self.n < 8 {
            return bad("n", format!("need at least 8 points, got {}", self.n));
        }
        if !(self.nu > 0.0) || !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return bad("nu", "nu, dt and t_end must be positive".into());
        }
        if self.psi.len() != self.n - 1 || self.f.len() != self.n || self.w0.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "expected {} edge thresholds and {} node values",
                self.n - 1,
                self.n
            )));
        }
        if self.psi.iter().any(|&p| !(p > 0.0)) {
            return bad("psi", "thresholds must be positive".into());
        }
        if self.w0[0] != 0.0 || self.w0[self.n - 1] != 0.0 {
            return bad("w0", "initial state must vanish at both ends".into());
        }
        let h = self.h();
        for e in 0..self.n - 1 {
            let g = (self.w0[e + 1] - self.w0[e]) / h;
            if g.abs() > self.psi[e] * (1.0 + 1e-12) {
                return Err(Error::InitialConstraintViolated {
                    i: e,
                    j: 0,
                    value: g.abs(),
                    psi: self.psi[e],
                });
            }
        }
        Ok(())
    }
}

/// Node values after each step; `states[k]` is the state at `(k + 1) dt`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory1D {
    pub dt: f64,
    pub h: f64,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory1D {
    pub fn max_gradient_excess(&self, psi: &[f64]) -> f64 {
        self.states
            .iter()
            .flat_map(|w| {
                w.windows(2)
                    .zip(psi)
                    .map(|(p, s)| ((p[1] - p[0]).abs() / self.h - s).max(0.0))
            })
            .fold(0.0, f64::max)
    }

    /// Discrete `L2(Q_T)` norm with trapezoidal weights in space.
    pub fn l2_norm(&self) -> f64 {
        self.states
            .iter()
            .map(|w| space_sq(w, self.h))
            .sum::<f64>()
            .sqrt()
            * self.dt.sqrt()
    }
}

fn space_sq(w: &[f64], h: f64) -> f64 {
    let n = w.len();
    w.iter()
        .enumerate()
        .map(|(i, v)| {
            if i == 0 || i == n - 1 {
                0.5 * h * v * v
            } else {
                h * v * v
            }
        })
        .sum()
}

/// Discrete `L2(Q_T)` distance of two trajectories on the same grid and
/// timeline.
pub fn compare(a: &Trajectory1D, b: &Trajectory1D) -> Result<f64> {
    if a.states.len() != b.states.len()
        || a.dt != b.dt
        || a.h != b.h
        || a.states
            .iter()
            .zip(&b.states)
            .any(|(x, y)| x.len() != y.len())
    {
        return Err(Error::ShapeMismatch(
            "oracle trajectories differ in grid or timeline".into(),
        ));
    }
    let sq: f64 = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            space_sq(&d, a.h)
        })
        .sum();
    Ok((sq * a.dt).sqrt())
}

/// Stationarity target for the projected gradient iteration.
pub const STATIONARITY_TOL: f64 = 1e-10;
/// Energy decrease counted as progress.
pub const STALL_DECREASE: f64 = 1e-14;
/// Iterations without progress before the solver gives up.
pub const STALL_WINDOW: usize = 100;
const MAX_ITERS: usize = 1_000_000;

/// Euclidean projection onto `{|g_e| <= psi_e} ∩ {sum g_e = 0}`: clipping of
/// `y - mu` with the shift `mu` found by bisection on the monotone sum.
pub fn project_feasible(y: &[f64], psi: &[f64], out: &mut [f64]) {
    let sum_at = |mu: f64| -> f64 { y.iter().zip(psi).map(|(v, p)| (v - mu).clamp(-p, *p)).sum() };
    let mut lo = y
        .iter()
        .zip(psi)
        .map(|(v, p)| v - p)
        .fold(f64::INFINITY, f64::min);
    let mut hi = y
        .iter()
        .zip(psi)
        .map(|(v, p)| v + p)
        .fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sum_at(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut mu = 0.5 * (lo + hi);
    let free = y
        .iter()
        .zip(psi)
        .filter(|(v, p)| (*v - mu).abs() < **p)
        .count();
    if free > 0 {
        mu += sum_at(mu) / free as f64;
    }
    for ((o, v), p) in out.iter_mut().zip(y).zip(psi) {
        *o = (v - mu).clamp(-p, *p);
    }
}

/// Backward-Euler step energy in edge-gradient variables.
struct StepEnergy<'a> {
    p: &'a Oracle1DProblem,
    prev: &'a [f64],
    lipschitz: f64,
}

impl StepEnergy<'_> {
    fn new<'a>(p: &'a Oracle1DProblem, prev: &'a [f64]) -> StepEnergy<'a> {
        let h = p.h();
        let interior = (p.n - 2) as f64;
        let edges = (p.n - 1) as f64;
        StepEnergy {
            p,
            prev,
            lipschitz: h / p.dt * (h * h * interior * edges) + p.nu * h,
        }
    }

    fn nodes(&self, g: &[f64], w: &mut [f64]) {
        let h = self.p.h();
        w[0] = 0.0;
        for e in 0..g.len() {
            w[e + 1] = w[e] + h * g[e];
        }
    }

    fn value(&self, g: &[f64], w: &mut [f64]) -> f64 {
        self.nodes(g, w);
        let (h, dt, nu) = (self.p.h(), self.p.dt, self.p.nu);
        let n = self.p.n;
        let e: f64 = (1..n - 1)
            .map(|i| {
                let d = w[i] - self.prev[i];
                h * (0.5 * d * d / dt - self.p.f[i] * w[i])
            })
            .sum();
        e + 0.5 * nu * h * g.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, g: &[f64], w: &mut [f64], out: &mut [f64]) {
        self.nodes(g, w);
        let (h, dt, nu) = (self.p.h(), self.p.dt, self.p.nu);
        let n = self.p.n;
        let mut tail = 0.0;
        for e in (0..n - 1).rev() {
            let i = e + 1;
            if i < n - 1 {
                tail += h * ((w[i] - self.prev[i]) / dt - self.p.f[i]);
            }
            out[e] = h * tail + nu * h * g[e];
        }
    }
}

/// Minimizes one step's energy over the feasible gradients with accelerated
/// projected gradient descent and adaptive restart.
fn projected_step(p: &Oracle1DProblem, prev: &[f64], g: &mut [f64]) -> Result<usize> {
    let m = p.n - 1;
    let en = StepEnergy::new(p, prev);
    let step = 1.0 / en.lipschitz;
    let mut w = vec![0.0; p.n];
    let mut grad = vec![0.0; m];
    let mut trial = vec![0.0; m];
    let mut y = g.to_vec();
    let mut momentum = 1.0f64;
    let mut energy = en.value(g, &mut w);
    let mut best_station = f64::INFINITY;
    let mut idle = 0usize;
    for it in 1..=MAX_ITERS {
        en.gradient(g, &mut w, &mut grad);
        for e in 0..m {
            trial[e] = g[e] - step * grad[e];
        }
        let mut mapped = vec![0.0; m];
        project_feasible(&trial, &p.psi, &mut mapped);
        let station = g
            .iter()
            .zip(&mapped)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = g.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if station <= STATIONARITY_TOL * scale {
            return Ok(it);
        }

        en.gradient(&y, &mut w, &mut grad);
        for e in 0..m {
            trial[e] = y[e] - step * grad[e];
        }
        let mut next = vec![0.0; m];
        project_feasible(&trial, &p.psi, &mut next);
        let mut next_energy = en.value(&next, &mut w);
        if next_energy > energy {
            momentum = 1.0;
            next = mapped;
            next_energy = en.value(&next, &mut w);
            y.copy_from_slice(&next);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / t_next;
            for e in 0..m {
                y[e] = next[e] + beta * (next[e] - g[e]);
            }
            momentum = t_next;
        }
        let progressed = energy - next_energy > STALL_DECREASE || station < best_station;
        best_station = best_station.min(station);
        idle = if progressed { 0 } else { idle + 1 };
        if idle >= STALL_WINDOW || it == MAX_ITERS {
            return Err(Error::ProjectionStalled {
                iterations: it,
                stationarity: station,
            });
        }
        g.copy_from_slice(&next);
        energy = next_energy;
    }
    unreachable!("loop returns on its last iteration")
}

/// Reference solution: each backward-Euler step is the exact minimizer of
/// the step energy over gradient-feasible states.
pub fn solve_projected(p: &Oracle1DProblem) -> Result<Trajectory1D> {
    p.validate()?;
    let h = p.h();
    let m = p.n - 1;
    let mut w = p.w0.clone();
    let mut g: Vec<f64> = (0..m).map(|e| (w[e + 1] - w[e]) / h).collect();
    let mut states = Vec::with_capacity(p.steps());
    for _ in 0..p.steps() {
        let mut start = vec![0.0; m];
        project_feasible(&g, &p.psi, &mut start);
        g = start;
        projected_step(p, &w, &mut g)?;
        let mut next = vec![0.0; p.n];
        StepEnergy::new(p, &w).nodes(&g, &mut next);
        next[p.n - 1] = 0.0;
        w = next;
        states.push(w.clone());
    }
    Ok(Trajectory1D {
        dt: p.dt,
        h,
        states,
    })
}

/// Solves the symmetric tridiagonal system with diagonal `d` and
/// off-diagonal `o` in place of `b` (Thomas algorithm).
fn tridiagonal(d: &[f64], o: &[f64], b: &mut [f64]) {
    let n = d.len();
    let mut c = vec![0.0; n];
    let mut piv = d[0];
    b[0] /= piv;
    for i in 1..n {
        c[i - 1] = o[i - 1] / piv;
        piv = d[i] - o[i - 1] * c[i - 1];
        b[i] = (b[i] - o[i - 1] * b[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        b[i] -= c[i] * b[i + 1];
    }
}

/// Unconstrained backward-Euler heat step by one tridiagonal solve.
pub fn solve_unconstrained(p: &Oracle1DProblem) -> Result<Trajectory1D> {
    let mut q = p.clone();
    q.psi = vec![f64::INFINITY; p.n - 1];
    let h = p.h();
    let k = p.n - 2;
    let mut w = p.w0.clone();
    let mut states = Vec::with_capacity(p.steps());
    for _ in 0..p.steps() {
        let d = vec![h / p.dt + 2.0 * p.nu / h; k];
        let o = vec![-p.nu / h; k - 1];
        let mut b: Vec<f64> = (1..p.n - 1).map(|i| h * (w[i] / p.dt + p.f[i])).collect();
        tridiagonal(&d, &o, &mut b);
        w = std::iter::once(0.0)
            .chain(b)
            .chain(std::iter::once(0.0))
            .collect();
        states.push(w.clone());
    }
    Ok(Trajectory1D {
        dt: p.dt,
        h,
        states,
    })
}

/// Edge flux `(nu + k_eps(g^2 - psi^2) + eps |g|^(q-2)) g` and its derivative.
fn flux(g: f64, psi: f64, nu: f64, pp: &PenaltyParams) -> (f64, f64) {
    let s = g * g - psi * psi;
    let k = k_eps(s, pp);
    let qe = (pp.q - 2) as i32;
    let qv = pp.eps * g.abs().powi(qe);
    let eta = nu + k + qv;
    let deta = nu + k + 2.0 * g * g * k_eps_prime(s, pp) + (pp.q - 1) as f64 * qv;
    (eta * g, deta)
}

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX: usize = 100;

/// Penalized problem: per step, Newton's method with backtracking on the
/// nodal residual, each linearization a tridiagonal solve.
pub fn solve_penalized_1d(p: &Oracle1DProblem, pp: &PenaltyParams) -> Result<Trajectory1D> {
    p.validate()?;
    let h = p.h();
    let n = p.n;
    let k = n - 2;
    let mut w = p.w0.clone();
    let mut states = Vec::with_capacity(p.steps());
    let residual = |w: &[f64], prev: &[f64], r: &mut [f64], fd: &mut [f64]| -> f64 {
        let mut fl = vec![0.0; n - 1];
        for e in 0..n - 1 {
            let (fv, dv) = flux((w[e + 1] - w[e]) / h, p.psi[e], p.nu, pp);
            fl[e] = fv;
            fd[e] = dv;
        }
        for i in 1..n - 1 {
            r[i - 1] = h * ((w[i] - prev[i]) / p.dt - p.f[i]) - (fl[i] - fl[i - 1]);
        }
        r.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    for step in 0..p.steps() {
        let t = (step + 1) as f64 * p.dt;
        let prev = w.clone();
        let mut r = vec![0.0; k];
        let mut fd = vec![0.0; n - 1];
        let mut norm = residual(&w, &prev, &mut r, &mut fd);
        let mut converged = false;
        for _ in 0..NEWTON_MAX {
            let diag: Vec<f64> = (1..n - 1)
                .map(|i| h / p.dt + (fd[i] + fd[i - 1]) / h)
                .collect();
            let off: Vec<f64> = (1..n - 2).map(|i| -fd[i] / h).collect();
            let mut dx: Vec<f64> = r.iter().map(|v| -v).collect();
            tridiagonal(&diag, &off, &mut dx);
            let size = dx.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let scale = w.iter().fold(f64::MIN_POSITIVE, |a, v| a.max(v.abs()));
            let mut theta = 1.0;
            let mut trial = w.clone();
            loop {
                for i in 1..n - 1 {
                    trial[i] = w[i] + theta * dx[i - 1];
                }
                let tn = residual(&trial, &prev, &mut r, &mut fd);
                if tn <= (1.0 - 1e-4 * theta) * norm || theta < 1.0 / 64.0 {
                    norm = tn;
                    break;
                }
                theta *= 0.5;
            }
            w.copy_from_slice(&trial);
            if !w.iter().all(|v| v.is_finite()) {
                break;
            }
            if theta * size <= NEWTON_TOL * scale || norm == 0.0 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::PicardDiverged {
                t,
                iterations: NEWTON_MAX,
            });
        }
        states.push(w.clone());
    }
    Ok(Trajectory1D {
        dt: p.dt,
        h,
        states,
    })
}

/// Penalized-against-projected gaps along a sequence of penalty parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub eps: Vec<f64>,
    pub gaps: Vec<f64>,
    /// `L2(Q_T)` norm of the projected solution.
    pub reference_norm: f64,
    pub relative_gaps: Vec<f64>,
    pub reference_excess: f64,
    pub penalized_excess: Vec<f64>,
}

pub fn oracle_sweep(p: &Oracle1DProblem, eps: &[f64]) -> Result<OracleReport> {
    let reference = solve_projected(p)?;
    let reference_norm = reference.l2_norm();
    let mut gaps = Vec::with_capacity(eps.len());
    let mut penalized_excess = Vec::with_capacity(eps.len());
    for &e in eps {
        let pen = solve_penalized_1d(p, &PenaltyParams::with_eps(e)?)?;
        gaps.push(compare(&pen, &reference)?);
        penalized_excess.push(pen.max_gradient_excess(&p.psi));
    }
    Ok(OracleReport {
        eps: eps.to_vec(),
        relative_gaps: gaps.iter().map(|g| g / reference_norm).collect(),
        gaps,
        reference_norm,
        reference_excess: reference.max_gradient_excess(&p.psi),
        penalized_excess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(psi: f64, f: f64) -> Oracle1DProblem {
        Oracle1DProblem::from_fns(24, 1.0, 0.01, 0.1, |_| psi, move |x| f * (1.0 + x), |_| 0.0)
            .unwrap()
    }

    #[test]
    fn zero_data_gives_zero() {
        let p = small(1.0, 0.0);
        assert!(solve_projected(&p)
            .unwrap()
            .states
            .iter()
            .flatten()
            .all(|&v| v == 0.0));
        let pen = solve_penalized_1d(&p, &PenaltyParams::with_eps(0.1).unwrap()).unwrap();
        assert!(pen.states.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_problems_are_rejected() {
        assert!(Oracle1DProblem::from_fns(4, 1.0, 0.1, 1.0, |_| 1.0, |_| 0.0, |_| 0.0).is_err());
        let r = Oracle1DProblem::from_fns(16, 1.0, 0.1, 1.0, |_| 0.1, |_| 0.0, |x| x * (1.0 - x));
        assert!(matches!(r, Err(Error::InitialConstraintViolated { .. })));
    }

    #[test]
    fn compare_examples() {
        let p = small(1.0, 1.0);
        let a = solve_unconstrained(&p).unwrap();
        assert_eq!(compare(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        for s in &mut b.states {
            for v in s.iter_mut() {
                *v += 0.3;
            }
        }
        assert_relative_eq!(
            compare(&a, &b).unwrap(),
            0.3 * (0.1f64).sqrt(),
            max_relative = 1e-12
        );
        b.states.pop();
        assert!(matches!(compare(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn inactive_constraint_reduces_to_heat_equation() {
        let p = small(1e6, 1e-3);
        let heat = solve_unconstrained(&p).unwrap();
        let proj = solve_projected(&p).unwrap();
        let pen = solve_penalized_1d(&p, &PenaltyParams::with_eps(0.1).unwrap()).unwrap();
        let scale = heat.l2_norm();
        assert!(compare(&heat, &proj).unwrap() <= 1e-8 * scale.max(1.0));
        assert!(compare(&pen, &proj).unwrap() <= 1e-8 * scale.max(1.0));
    }

    #[test]
    fn large_forcing_saturates_the_gradient() {
        let p = Oracle1DProblem::from_fns(33, 1.0, 0.05, 2.0, |_| 1.0, |_| 200.0, |_| 0.0).unwrap();
        let w = solve_projected(&p).unwrap();
        let last = w.states.last().unwrap();
        let h = p.h();
        let saturated = last
            .windows(2)
            .filter(|q| ((q[1] - q[0]).abs() / h - 1.0).abs() < 1e-8)
            .count();
        assert!(saturated >= p.n - 3, "{saturated} of {}", p.n - 1);
        let tent = last
            .iter()
            .enumerate()
            .map(|(i, v)| (v - (i as f64 * h).min(1.0 - i as f64 * h)).abs());
        assert!(tent.fold(0.0, f64::max) <= h);
    }

    #[test]
    fn projected_step_is_locally_optimal() {
        let p = small(0.6, 8.0);
        let h = p.h();
        let traj = solve_projected(&p).unwrap();
        assert!(traj.max_gradient_excess(&p.psi) <= 1e-12);
        let prev = &traj.states[traj.states.len() - 2];
        let last = traj.states.last().unwrap();
        let g: Vec<f64> = last.windows(2).map(|q| (q[1] - q[0]) / h).collect();
        let en = StepEnergy::new(&p, prev);
        let mut w = vec![0.0; p.n];
        let e0 = en.value(&g, &mut w);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let y: Vec<f64> = g.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
            let mut z = vec![0.0; g.len()];
            project_feasible(&y, &p.psi, &mut z);
            assert!(en.value(&z, &mut w) >= e0 - 1e-12 * e0.abs().max(1.0));
        }
    }

    #[test]
    fn penalized_gap_shrinks_with_eps() {
        let p = small(0.6, 8.0);
        let r = oracle_sweep(&p, &[0.4, 0.2, 0.1]).unwrap();
        assert!(
            r.gaps[0] > r.gaps[1] && r.gaps[1] > r.gaps[2],
            "{:?}",
            r.gaps
        );
        assert!(r.reference_excess <= 1e-12);
    }

    #[test]
    fn reference_problem_is_active_and_resolved() {
        let p = Oracle1DProblem::active_reference(64).unwrap();
        let r = oracle_sweep(&p, &[0.4, 0.1]).unwrap();
        assert!(r.penalized_excess[1] > 0.0);
        assert!(r.gaps[1] <= 1e-2 * r.reference_norm);
        assert!(r.gaps[1] < r.gaps[0]);
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent(
            y in proptest::collection::vec(-3.0f64..3.0, 9),
            psi in proptest::collection::vec(0.1f64..2.0, 9),
        ) {
            let mut z = vec![0.0; 9];
            project_feasible(&y, &psi, &mut z);
            prop_assert!(z.iter().sum::<f64>().abs() <= 1e-12);
            for (v, p) in z.iter().zip(&psi) {
                prop_assert!(v.abs() <= p + 1e-15);
            }
            let mut zz = vec![0.0; 9];
            project_feasible(&z, &psi, &mut zz);
            for (a, b) in z.iter().zip(&zz) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
