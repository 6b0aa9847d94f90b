//! Sources of the threshold `psi(x, t)`: given fields, time-mollified fields,
//! and solution-dependent functionals `Psi[u]`.

pub mod expr;
pub mod parabolic;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Domain, ScalarField};
use crate::stepper::Trajectory;
use expr::{Expr, Vars};
pub use parabolic::{solve_coupled_parabolic, ParabolicCoupling, ParabolicSolution};

/// Bounds `0 < psi_star <= psi <= psi_upper` every threshold must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBounds {
    pub psi_star: f64,
    pub psi_upper: f64,
}

impl ThresholdBounds {
    pub fn new(psi_star: f64, psi_upper: f64) -> Result<Self> {
        if !(psi_star > 0.0 && psi_star <= psi_upper && psi_upper.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "psi_star/psi_upper",
                reason: format!("need 0 < psi_star <= psi_upper, got [{psi_star}, {psi_upper}]"),
            });
        }
        Ok(Self {
            psi_star,
            psi_upper,
        })
    }

    /// Errors on the first cell outside the bounds (relative slack `1e-12`).
    pub fn check(&self, d: &Domain, psi: &ScalarField) -> Result<()> {
        let tol = 1e-12 * self.psi_upper;
        for j in 0..d.ny {
            for i in 0..d.nx {
                let v = psi.get(i, j);
                if !(v >= self.psi_star - tol && v <= self.psi_upper + tol) {
                    return Err(Error::BoundsViolated {
                        i,
                        j,
                        value: v,
                        lower: self.psi_star,
                        upper: self.psi_upper,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Kernel `K(x1, x2, t, y1, y2, s)` given as a closure.
pub type KernelFn = Arc<dyn Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync>;

/// Kernel `K(x, t, y, s)` of the nonlocal functional.
#[derive(Clone)]
pub enum Kernel {
    Constant(f64),
    /// `K = target(x, t) * source(y, s)`; both expressions use the variables
    /// `x y t` for their own point and time.
    Separable {
        target: Expr,
        source: Expr,
    },
    /// `K(x1, x2, t, y1, y2, s)`.
    Function(KernelFn),
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Separable { target, source } => write!(f, "Separable({target}, {source})"),
            Self::Function(_) => f.write_str("Function(..)"),
        }
    }
}

/// `Psi[v](x, t) = phi(x, t, zeta)` with
/// `zeta(x, t) = int_0^t int_Omega v(y, s) K(x, t, y, s) dy ds`.
#[derive(Debug, Clone)]
pub struct KernelFunctional {
    pub kernel: Kernel,
    /// Outer function in `x y t`, `gx gy` (the components of `zeta`) and
    /// `z = |zeta|`.
    pub phi: Expr,
}

/// `Psi[w](x, t) = phi(x, t) (alpha + beta int_{Q_T} |Dw|^2)`.
#[derive(Debug, Clone)]
pub struct NormFunctional {
    pub alpha: f64,
    pub beta: f64,
    pub phi: Expr,
}

impl NormFunctional {
    pub fn new(alpha: f64, beta: f64, phi: Expr) -> Result<Self> {
        if !(alpha > 0.0) || !(beta >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "alpha/beta",
                reason: format!("need alpha > 0 and beta >= 0, got ({alpha}, {beta})"),
            });
        }
        Ok(Self { alpha, beta, phi })
    }

    /// `Gamma(w) = alpha + beta |Dw|^2_{L2(Q_T)}` from the norm `|Dw|`.
    pub fn gamma(&self, v2_norm: f64) -> f64 {
        self.alpha + self.beta * v2_norm * v2_norm
    }

    /// Range `[min phi, max phi]` of the time-independent factor sampled on
    /// the cells at the given times.
    pub fn phi_range(&self, d: &Domain, times: &[f64]) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &t in times {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    let (x, y) = d.cell_center(i, j);
                    let v = self.phi.eval_xyt(x, y, t);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone)]
pub enum ThresholdSource {
    Constant(f64),
    Analytic(Expr),
    /// Fields at increasing times, linearly interpolated and clamped.
    Tabulated {
        times: Vec<f64>,
        fields: Vec<ScalarField>,
    },
    /// Solution of `psi_n + (1/n) d psi_n / dt = psi`, `psi_n(0) = psi(0)`,
    /// against a base sampled every `sample_dt` and linear in between.
    Mollified {
        base: Box<ThresholdSource>,
        n: f64,
        sample_dt: f64,
    },
    Norm(NormFunctional),
    Kernel(KernelFunctional),
    Parabolic(ParabolicCoupling),
}

/// Threshold source together with its admissible bounds.
#[derive(Debug, Clone)]
pub struct ThresholdProvider {
    pub source: ThresholdSource,
    pub bounds: ThresholdBounds,
}

impl ThresholdProvider {
    pub fn new(source: ThresholdSource, bounds: ThresholdBounds) -> Self {
        Self { source, bounds }
    }

    pub fn constant(c: f64) -> Result<Self> {
        Ok(Self::new(
            ThresholdSource::Constant(c),
            ThresholdBounds::new(c, c)?,
        ))
    }

    pub fn is_functional(&self) -> bool {
        self.source.is_functional()
    }

    /// Precomputes whatever the source needs from `traj`.
    pub fn prepare<'a>(
        &'a self,
        d: &Domain,
        traj: Option<&'a Trajectory>,
    ) -> Result<PreparedThreshold<'a>> {
        let cache = match &self.source {
            ThresholdSource::Norm(nf) => {
                let w = traj.ok_or(Error::MissingTrajectory)?;
                Cache::Gamma(nf.gamma(w.v2_norm()))
            }
            ThresholdSource::Kernel(_) => {
                let w = traj.ok_or(Error::MissingTrajectory)?;
                Cache::Kernel(KernelSamples::from_trajectory(w))
            }
            ThresholdSource::Parabolic(pc) => {
                let w = traj.ok_or(Error::MissingTrajectory)?;
                let vel: Vec<_> = w.states.iter().map(|s| s.u.clone()).collect();
                Cache::Parabolic(solve_coupled_parabolic(d, w.dt(), &vel, pc)?)
            }
            _ => Cache::None,
        };
        Ok(PreparedThreshold {
            provider: self,
            domain: *d,
            cache,
        })
    }

    /// Threshold field at time `t`, checked against the bounds.
    pub fn eval(&self, d: &Domain, traj: Option<&Trajectory>, t: f64) -> Result<ScalarField> {
        self.prepare(d, traj)?.eval(t)
    }
}

/// Mollifies a given (non-functional) threshold with parameter `n >= 1`.
pub fn mollify(base: ThresholdProvider, n: f64, sample_dt: f64) -> Result<ThresholdProvider> {
    if !(n >= 1.0) || !(sample_dt > 0.0) {
        return Err(Error::InvalidParameter {
            name: "n",
            reason: format!("mollifier needs n >= 1 and a positive sampling step, got n = {n}, dt = {sample_dt}"),
        });
    }
    if base.is_functional() {
        return Err(Error::InvalidParameter {
            name: "n",
            reason: "only given thresholds can be mollified".into(),
        });
    }
    Ok(ThresholdProvider {
        source: ThresholdSource::Mollified {
            base: Box::new(base.source),
            n,
            sample_dt,
        },
        bounds: base.bounds,
    })
}

impl ThresholdSource {
    pub fn is_functional(&self) -> bool {
        matches!(self, Self::Norm(_) | Self::Kernel(_) | Self::Parabolic(_))
    }

    /// Unchecked value of a given (non-functional) source.
    pub fn eval_given(&self, d: &Domain, t: f64) -> Result<ScalarField> {
        match self {
            Self::Constant(c) => Ok(ScalarField::constant(d, *c)),
            Self::Analytic(e) => Ok(ScalarField::from_fn(d, |x, y| e.eval_xyt(x, y, t))),
            Self::Tabulated { times, fields } => tabulated(d, times, fields, t),
            Self::Mollified { base, n, sample_dt } => mollified(d, base, *n, *sample_dt, t),
            _ => Err(Error::MissingTrajectory),
        }
    }
}

fn tabulated(d: &Domain, times: &[f64], fields: &[ScalarField], t: f64) -> Result<ScalarField> {
    if times.is_empty() || times.len() != fields.len() {
        return Err(Error::ShapeMismatch(format!(
            "tabulated threshold has {} times and {} fields",
            times.len(),
            fields.len()
        )));
    }
    if fields.iter().any(|f| f.nx != d.nx || f.ny != d.ny) {
        return Err(Error::ShapeMismatch(
            "tabulated field does not match the grid".into(),
        ));
    }
    let k = times.partition_point(|&s| s <= t);
    if k == 0 {
        return Ok(fields[0].clone());
    }
    if k == times.len() {
        return Ok(fields[k - 1].clone());
    }
    let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
    Ok(fields[k - 1].zip_map(&fields[k], |a, b| (1.0 - w) * a + w * b))
}

/// Exact solution of the relaxation ODE against the piecewise-linear
/// interpolant of the base on the sampling grid.
fn mollified(
    d: &Domain,
    base: &ThresholdSource,
    n: f64,
    sample_dt: f64,
    t: f64,
) -> Result<ScalarField> {
    let mut a = 0.0;
    let mut psi_a = base.eval_given(d, 0.0)?;
    let mut y = psi_a.clone();
    while a < t - 1e-14 * t.max(1.0) {
        let b = (a + sample_dt).min(t);
        let tau = b - a;
        let psi_b = base.eval_given(d, b)?;
        let decay = (-n * tau).exp();
        for k in 0..y.data.len() {
            let slope = (psi_b.data[k] - psi_a.data[k]) / tau;
            y.data[k] = psi_b.data[k] - slope / n + (y.data[k] - psi_a.data[k] + slope / n) * decay;
        }
        a = b;
        psi_a = psi_b;
    }
    Ok(y)
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Gamma(f64),
    Kernel(KernelSamples),
    Parabolic(ParabolicSolution),
}

/// Provider bound to a reference trajectory.
#[derive(Debug, Clone)]
pub struct PreparedThreshold<'a> {
    provider: &'a ThresholdProvider,
    domain: Domain,
    cache: Cache,
}

impl PreparedThreshold<'_> {
    pub fn eval(&self, t: f64) -> Result<ScalarField> {
        let d = &self.domain;
        let psi = match (&self.provider.source, &self.cache) {
            (ThresholdSource::Norm(nf), Cache::Gamma(g)) => {
                ScalarField::from_fn(d, |x, y| nf.phi.eval_xyt(x, y, t) * g)
            }
            (ThresholdSource::Kernel(kf), Cache::Kernel(samples)) => {
                let (zx, zy) = samples.zeta(d, &kf.kernel, t);
                phi_of_zeta(d, &kf.phi, t, &zx, &zy)
            }
            (ThresholdSource::Parabolic(pc), Cache::Parabolic(sol)) => {
                let (z, gx, gy) = sol.at(t);
                pc.outer_field(d, t, &z, &gx, &gy)
            }
            (src, _) => src.eval_given(d, t)?,
        };
        self.provider.bounds.check(d, &psi)?;
        Ok(psi)
    }
}

/// Cell-centred velocity samples at the time midpoints of a trajectory.
#[derive(Debug, Clone)]
pub struct KernelSamples {
    pub dt: f64,
    /// `(s, vx, vy)` at `s = (k + 1/2) dt`.
    pub samples: Vec<(f64, ScalarField, ScalarField)>,
}

impl KernelSamples {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let dt = traj.dt();
        let mut prev = traj.initial.cell_centered();
        let mut samples = Vec::with_capacity(traj.len());
        for (k, s) in traj.states.iter().enumerate() {
            let next = s.u.cell_centered();
            let vx = prev.0.zip_map(&next.0, |a, b| 0.5 * (a + b));
            let vy = prev.1.zip_map(&next.1, |a, b| 0.5 * (a + b));
            samples.push(((k as f64 + 0.5) * dt, vx, vy));
            prev = next;
        }
        Self { dt, samples }
    }

    /// Midpoint quadrature of `zeta(x, t)` over the whole steps in `[0, t]`.
    pub fn zeta(&self, d: &Domain, kernel: &Kernel, t: f64) -> (ScalarField, ScalarField) {
        let cell_area = d.h * d.h;
        let steps: Vec<_> = self
            .samples
            .iter()
            .filter(|(s, _, _)| *s + 0.5 * self.dt <= t + 1e-9 * self.dt)
            .collect();
        let mut zx = ScalarField::zeros(d);
        let mut zy = ScalarField::zeros(d);
        match kernel {
            Kernel::Constant(c) => {
                let (mut sx, mut sy) = (0.0, 0.0);
                for (_, vx, vy) in &steps {
                    sx += vx.data.iter().sum::<f64>();
                    sy += vy.data.iter().sum::<f64>();
                }
                let w = c * cell_area * self.dt;
                zx.data.iter_mut().for_each(|v| *v = w * sx);
                zy.data.iter_mut().for_each(|v| *v = w * sy);
            }
            Kernel::Separable { target, source } => {
                let (mut sx, mut sy) = (0.0, 0.0);
                for (s, vx, vy) in &steps {
                    for j in 0..d.ny {
                        for i in 0..d.nx {
                            let (y1, y2) = d.cell_center(i, j);
                            let w = source.eval_xyt(y1, y2, *s);
                            let k = d.cell(i, j);
                            sx += w * vx.data[k];
                            sy += w * vy.data[k];
                        }
                    }
                }
                let (sx, sy) = (sx * cell_area * self.dt, sy * cell_area * self.dt);
                for j in 0..d.ny {
                    for i in 0..d.nx {
                        let (x1, x2) = d.cell_center(i, j);
                        let g = target.eval_xyt(x1, x2, t);
                        let k = d.cell(i, j);
                        zx.data[k] = g * sx;
                        zy.data[k] = g * sy;
                    }
                }
            }
            Kernel::Function(kf) => {
                for j in 0..d.ny {
                    for i in 0..d.nx {
                        let (x1, x2) = d.cell_center(i, j);
                        let (mut ax, mut ay) = (0.0, 0.0);
                        for (s, vx, vy) in &steps {
                            for jj in 0..d.ny {
                                for ii in 0..d.nx {
                                    let (y1, y2) = d.cell_center(ii, jj);
                                    let w = kf(x1, x2, t, y1, y2, *s);
                                    let q = d.cell(ii, jj);
                                    ax += w * vx.data[q];
                                    ay += w * vy.data[q];
                                }
                            }
                        }
                        let k = d.cell(i, j);
                        zx.data[k] = ax * cell_area * self.dt;
                        zy.data[k] = ay * cell_area * self.dt;
                    }
                }
            }
        }
        (zx, zy)
    }
}

/// `phi(x, t, zeta)` on the cells.
pub fn phi_of_zeta(
    d: &Domain,
    phi: &Expr,
    t: f64,
    zx: &ScalarField,
    zy: &ScalarField,
) -> ScalarField {
    let mut out = ScalarField::zeros(d);
    for j in 0..d.ny {
        for i in 0..d.nx {
            let (x, y) = d.cell_center(i, j);
            let k = d.cell(i, j);
            let (gx, gy) = (zx.data[k], zy.data[k]);
            out.data[k] = phi.eval(&Vars {
                x,
                y,
                t,
                z: gx.hypot(gy),
                gx,
                gy,
            });
        }
    }
    out
}

/// Kernel functional of a trajectory at time `t` (unchecked).
pub fn eval_kernel(traj: &Trajectory, kf: &KernelFunctional, t: f64) -> ScalarField {
    let d = traj.grid.domain;
    let (zx, zy) = KernelSamples::from_trajectory(traj).zeta(&d, &kf.kernel, t);
    phi_of_zeta(&d, &kf.phi, t, &zx, &zy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, VelocityField};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> Domain {
        Domain::unit_square(n).unwrap()
    }

    #[test]
    fn constant_provider_is_ones() {
        let d = unit(6);
        let p = ThresholdProvider::constant(1.0).unwrap();
        let psi = p.eval(&d, None, 0.3).unwrap();
        assert!(psi.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bounds_are_enforced() {
        let d = unit(6);
        let p = ThresholdProvider::new(
            ThresholdSource::Analytic(Expr::parse("1 + x").unwrap()),
            ThresholdBounds::new(1.0, 1.5).unwrap(),
        );
        match p.eval(&d, None, 0.0) {
            Err(Error::BoundsViolated { i, value, .. }) => {
                assert!(value > 1.5);
                assert!(i >= 3);
            }
            other => panic!("{other:?}"),
        }
        assert!(ThresholdBounds::new(0.0, 1.0).is_err());
        assert!(ThresholdBounds::new(2.0, 1.0).is_err());
    }

    #[test]
    fn functionals_need_a_trajectory() {
        let d = unit(6);
        let nf = NormFunctional::new(1.0, 0.1, Expr::constant(1.0)).unwrap();
        let p = ThresholdProvider::new(
            ThresholdSource::Norm(nf),
            ThresholdBounds::new(0.5, 2.0).unwrap(),
        );
        assert!(matches!(
            p.eval(&d, None, 0.0),
            Err(Error::MissingTrajectory)
        ));
    }

    #[test]
    fn tabulated_interpolates_and_clamps() {
        let d = unit(4);
        let src = ThresholdSource::Tabulated {
            times: vec![0.0, 1.0],
            fields: vec![
                ScalarField::constant(&d, 1.0),
                ScalarField::constant(&d, 3.0),
            ],
        };
        assert_relative_eq!(src.eval_given(&d, 0.25).unwrap().data[0], 1.5);
        assert_relative_eq!(src.eval_given(&d, 7.0).unwrap().data[0], 3.0);
        assert_relative_eq!(src.eval_given(&d, -1.0).unwrap().data[0], 1.0);
    }

    #[test]
    fn mollifier_fixes_constants() {
        let d = unit(4);
        for n in [1.0, 4.0, 64.0] {
            let v = mollified(&d, &ThresholdSource::Constant(0.7), n, 0.05, 0.83).unwrap();
            assert!(v.data.iter().all(|&x| x == 0.7));
        }
    }

    #[test]
    fn mollifier_linear_closed_form() {
        let d = unit(4);
        let base = ThresholdSource::Analytic(Expr::parse("t").unwrap());
        for &t in &[0.0, 0.1, 0.5, 1.0] {
            let v = mollified(&d, &base, 1.0, 0.3, t).unwrap();
            let exact = t - 1.0 + (-t).exp();
            assert!((v.data[0] - exact).abs() < 1e-14, "t={t}");
        }
        // independent check: implicit Euler on a very fine grid
        let (mut y, dt) = (0.0, 1e-5);
        for k in 1..=100_000 {
            y = (y + dt * (k as f64 * dt)) / (1.0 + dt);
        }
        let v = mollified(&d, &base, 1.0, 0.3, 1.0).unwrap();
        assert!((v.data[0] - y).abs() < 1e-5);
    }

    #[test]
    fn mollifier_error_halves_with_n() {
        let d = unit(4);
        let base = ThresholdSource::Analytic(Expr::parse("2 + sin(2*pi*t) + x").unwrap());
        let sup_err = |n: f64| {
            (0..=50)
                .map(|k| {
                    let t = k as f64 / 50.0;
                    let m = mollified(&d, &base, n, 0.005, t).unwrap();
                    let b = base.eval_given(&d, t).unwrap();
                    m.zip_map(&b, |a, b| a - b).max_abs()
                })
                .fold(0.0, f64::max)
        };
        let mut prev = sup_err(8.0);
        for n in [16.0, 32.0, 64.0] {
            let e = sup_err(n);
            let ratio = prev / e;
            assert!((1.6..=2.4).contains(&ratio), "n={n}: ratio {ratio}");
            prev = e;
        }
    }

    #[test]
    fn mollifier_preserves_bounds() {
        let d = unit(6);
        let base = ThresholdProvider::new(
            ThresholdSource::Analytic(Expr::parse("1.5 + 0.5*sin(9*t + 3*x)").unwrap()),
            ThresholdBounds::new(1.0, 2.0).unwrap(),
        );
        let m = mollify(base, 3.0, 0.01).unwrap();
        for k in 0..20 {
            let psi = m.eval(&d, None, k as f64 * 0.05).unwrap();
            assert!(psi.min() >= 1.0 && psi.max() <= 2.0);
        }
        assert!(mollify(ThresholdProvider::constant(1.0).unwrap(), 0.5, 0.1).is_err());
    }

    fn const_samples(d: &Domain, vx: f64, vy: f64, steps: usize, dt: f64) -> KernelSamples {
        KernelSamples {
            dt,
            samples: (0..steps)
                .map(|k| {
                    (
                        (k as f64 + 0.5) * dt,
                        ScalarField::constant(d, vx),
                        ScalarField::constant(d, vy),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn zero_kernel_gives_phi_at_zero() {
        let d = unit(5);
        let s = const_samples(&d, 0.3, -0.2, 4, 0.1);
        let (zx, zy) = s.zeta(&d, &Kernel::Constant(0.0), 0.4);
        let phi = Expr::parse("1 + x + z").unwrap();
        let out = phi_of_zeta(&d, &phi, 0.4, &zx, &zy);
        let expect = ScalarField::from_fn(&d, |x, _| 1.0 + x);
        assert_eq!(out, expect);
    }

    #[test]
    fn unit_kernel_integrates_constant_velocity() {
        let d = unit(8);
        let s = const_samples(&d, 1.0, 0.0, 10, 0.1);
        let (zx, zy) = s.zeta(&d, &Kernel::Constant(1.0), 0.5);
        for k in 0..d.n_cells() {
            assert_relative_eq!(zx.data[k], 0.5, max_relative = 1e-12);
            assert_eq!(zy.data[k], 0.0);
        }
    }

    #[test]
    fn separable_kernel_matches_direct_quadrature() {
        let d = unit(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = KernelSamples {
            dt: 0.05,
            samples: (0..6)
                .map(|k| {
                    (
                        (k as f64 + 0.5) * 0.05,
                        ScalarField::from_fn(&d, |_, _| rng.gen_range(-1.0..1.0)),
                        ScalarField::from_fn(&d, |_, _| rng.gen_range(-1.0..1.0)),
                    )
                })
                .collect(),
        };
        let sep = Kernel::Separable {
            target: Expr::parse("(1 + x*y) * exp(-t)").unwrap(),
            source: Expr::parse("cos(x) + y*t").unwrap(),
        };
        let direct = Kernel::Function(Arc::new(|x1, x2, t, y1, y2, s| {
            (1.0 + x1 * x2) * (-t).exp() * (y1.cos() + y2 * s)
        }));
        let (ax, ay) = samples.zeta(&d, &sep, 0.3);
        let (bx, by) = samples.zeta(&d, &direct, 0.3);
        for k in 0..d.n_cells() {
            assert!((ax.data[k] - bx.data[k]).abs() < 1e-12);
            assert!((ay.data[k] - by.data[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_damps_high_frequencies() {
        let d = unit(64);
        let dt = 0.1;
        let sep = Kernel::Separable {
            target: Expr::parse("1 + x").unwrap(),
            source: Expr::parse("exp(-(x - 0.3)*(x - 0.3) - y)").unwrap(),
        };
        let change = |m: f64| {
            // unit L2 norm perturbation of frequency m
            let amp = 2.0;
            let noise = ScalarField::from_fn(&d, |x, y| {
                amp * (m * std::f64::consts::PI * x).sin() * (m * std::f64::consts::PI * y).sin()
            });
            let s = KernelSamples {
                dt,
                samples: (0..5)
                    .map(|k| ((k as f64 + 0.5) * dt, noise.clone(), ScalarField::zeros(&d)))
                    .collect(),
            };
            s.zeta(&d, &sep, 0.5).0.max_abs()
        };
        let (c1, c2, c3) = (change(2.0), change(8.0), change(32.0));
        assert!(c2 < 0.5 * c1 && c3 < 0.5 * c2, "{c1} {c2} {c3}");
    }

    #[test]
    fn norm_functional_at_rest_is_alpha_phi() {
        let nf = NormFunctional::new(1.5, 0.7, Expr::parse("1 + x").unwrap()).unwrap();
        assert_eq!(nf.gamma(0.0), 1.5);
        assert!(NormFunctional::new(0.0, 0.1, Expr::constant(1.0)).is_err());
        assert!(NormFunctional::new(1.0, -0.1, Expr::constant(1.0)).is_err());
        let (lo, hi) = nf.phi_range(&unit(4), &[0.0]);
        assert_relative_eq!(lo, 1.125);
        assert_relative_eq!(hi, 1.875);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn norm_functional_lipschitz_on_ball(seed in 0u64..10_000, beta in 0.0f64..2.0) {
            let g = Grid::new(unit(8));
            let nf = NormFunctional::new(1.0, beta, Expr::constant(1.0)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut field = |s: f64| VelocityField::from_fn(&g.domain, |_, _| {
                (s * rng.gen_range(-1.0..1.0), s * rng.gen_range(-1.0..1.0))
            });
            let (w1, w2) = (field(0.1), field(0.1));
            let v2 = |w: &VelocityField| {
                let s = g.strain_norm(w);
                s.inner(&s, g.h()).sqrt()
            };
            let r = v2(&w1).max(v2(&w2));
            let lhs = (nf.gamma(v2(&w1)) - nf.gamma(v2(&w2))).abs();
            let rhs = 2.0 * beta * r * v2(&w1.sub(&w2));
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-15);
        }
    }
}
