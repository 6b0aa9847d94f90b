//! Convective parabolic scalar equation
//! `dz/dt - div(A grad z) + v . grad z = rho`, `z = 0` on the walls,
//! driving a solution-dependent threshold `psi(x, t, z, grad z)`.

use serde::Serialize;

use super::expr::{Expr, Vars};
use crate::error::{Error, Result};
use crate::grid::{Domain, ScalarField, VelocityField};
use crate::sparse::Banded;

/// Coefficients and data of the coupled equation. `A` must be diagonal.
#[derive(Debug, Clone, Serialize)]
pub struct ParabolicCoupling {
    pub a11: Expr,
    pub a12: Expr,
    pub a22: Expr,
    pub source: Expr,
    pub zeta0: Expr,
    /// Outer function in the variables `x y t`, `z` (the scalar), and
    /// `gx gy` (its gradient).
    pub outer: Expr,
}

/// Scalar and centred gradient at `t = 0, dt, 2 dt, ...`.
#[derive(Debug, Clone)]
pub struct ParabolicSolution {
    pub times: Vec<f64>,
    pub zeta: Vec<ScalarField>,
    pub grad_x: Vec<ScalarField>,
    pub grad_y: Vec<ScalarField>,
}

impl ParabolicSolution {
    /// Linear interpolation in time, clamped to the covered interval.
    pub fn at(&self, t: f64) -> (ScalarField, ScalarField, ScalarField) {
        let last = self.times.len() - 1;
        let dt = if last > 0 {
            self.times[1] - self.times[0]
        } else {
            1.0
        };
        let s = (t / dt).clamp(0.0, last as f64);
        let k = (s.floor() as usize).min(last);
        let w = s - k as f64;
        if w < 1e-12 || k == last {
            return (
                self.zeta[k].clone(),
                self.grad_x[k].clone(),
                self.grad_y[k].clone(),
            );
        }
        let mix = |a: &ScalarField, b: &ScalarField| a.zip_map(b, |p, q| (1.0 - w) * p + w * q);
        (
            mix(&self.zeta[k], &self.zeta[k + 1]),
            mix(&self.grad_x[k], &self.grad_x[k + 1]),
            mix(&self.grad_y[k], &self.grad_y[k + 1]),
        )
    }
}

impl ParabolicCoupling {
    /// Checks on cell and face samples over `[0, t_end]` that `A` is diagonal
    /// and uniformly elliptic.
    pub fn validate(&self, d: &Domain, t_end: f64) -> Result<()> {
        let times = [0.0, 0.5 * t_end, t_end];
        let mut a0 = f64::INFINITY;
        for &t in &times {
            for j in 0..d.ny {
                for i in 0..d.nx {
                    let (x, y) = d.cell_center(i, j);
                    let a12 = self.a12.eval_xyt(x, y, t);
                    if a12 != 0.0 {
                        return Err(Error::InvalidParameter {
                            name: "a12",
                            reason: format!(
                                "off-diagonal diffusivity is not supported (a12 = {a12} at ({x}, {y}, {t}))"
                            ),
                        });
                    }
                    a0 = a0
                        .min(self.a11.eval_xyt(x, y, t))
                        .min(self.a22.eval_xyt(x, y, t));
                }
            }
        }
        if !(a0 > 0.0) {
            return Err(Error::InvalidParameter {
                name: "a11/a22",
                reason: format!("diffusivity must be uniformly positive, minimum sample {a0}"),
            });
        }
        Ok(())
    }

    /// Evaluates the outer function on the cells.
    pub fn outer_field(
        &self,
        d: &Domain,
        t: f64,
        z: &ScalarField,
        gx: &ScalarField,
        gy: &ScalarField,
    ) -> ScalarField {
        let mut out = ScalarField::zeros(d);
        for j in 0..d.ny {
            for i in 0..d.nx {
                let (x, y) = d.cell_center(i, j);
                let k = d.cell(i, j);
                out.data[k] = self.outer.eval(&Vars {
                    x,
                    y,
                    t,
                    z: z.data[k],
                    gx: gx.data[k],
                    gy: gy.data[k],
                });
            }
        }
        out
    }
}

/// Backward Euler with first-order upwind transport and five-point
/// diffusion. `velocities[k]` is the transporting field at `(k + 1) dt`.
pub fn solve_coupled_parabolic(
    d: &Domain,
    dt: f64,
    velocities: &[VelocityField],
    pc: &ParabolicCoupling,
) -> Result<ParabolicSolution> {
    pc.validate(d, dt * velocities.len() as f64)?;
    let (nx, ny, h) = (d.nx, d.ny, d.h);
    let n = d.n_cells();
    let mut zeta = ScalarField::zeros(d);
    for j in 0..ny {
        for i in 0..nx {
            let (x, y) = d.cell_center(i, j);
            zeta.data[d.cell(i, j)] = pc.zeta0.eval_xyt(x, y, 0.0);
        }
    }
    let mut out = ParabolicSolution {
        times: vec![0.0],
        zeta: Vec::with_capacity(velocities.len() + 1),
        grad_x: Vec::with_capacity(velocities.len() + 1),
        grad_y: Vec::with_capacity(velocities.len() + 1),
    };
    let push = |out: &mut ParabolicSolution, z: ScalarField| {
        let (gx, gy) = centred_gradient(d, &z);
        out.zeta.push(z);
        out.grad_x.push(gx);
        out.grad_y.push(gy);
    };
    push(&mut out, zeta.clone());

    let h2 = h * h;
    for (k, v) in velocities.iter().enumerate() {
        let t = (k + 1) as f64 * dt;
        let (vx, vy) = v.cell_centered();
        let mut m = Banded::zeros(n, nx, nx);
        let mut rhs = vec![0.0; n];
        for j in 0..ny {
            for i in 0..nx {
                let r = d.cell(i, j);
                let (x, y) = d.cell_center(i, j);
                m.add(r, r, 1.0 / dt);
                rhs[r] = zeta.data[r] / dt + pc.source.eval_xyt(x, y, t);

                // diffusion through the four faces; walls sit h/2 away
                let faces = [
                    (
                        pc.a11.eval_xyt(x - 0.5 * h, y, t),
                        (i > 0).then(|| d.cell(i - 1, j)),
                    ),
                    (
                        pc.a11.eval_xyt(x + 0.5 * h, y, t),
                        (i + 1 < nx).then(|| d.cell(i + 1, j)),
                    ),
                    (
                        pc.a22.eval_xyt(x, y - 0.5 * h, t),
                        (j > 0).then(|| d.cell(i, j - 1)),
                    ),
                    (
                        pc.a22.eval_xyt(x, y + 0.5 * h, t),
                        (j + 1 < ny).then(|| d.cell(i, j + 1)),
                    ),
                ];
                for (a, nb) in faces {
                    let c = a / h2;
                    match nb {
                        Some(q) => {
                            m.add(r, r, c);
                            m.add(r, q, -c);
                        }
                        None => m.add(r, r, 2.0 * c),
                    }
                }

                // upwind transport; the wall ghost value is the negated cell value
                let upwind = |m: &mut Banded, vel: f64, back: Option<usize>, fwd: Option<usize>| {
                    let (c, nb) = if vel > 0.0 {
                        (vel / h, back)
                    } else {
                        (-vel / h, fwd)
                    };
                    match nb {
                        Some(q) => {
                            m.add(r, r, c);
                            m.add(r, q, -c);
                        }
                        None => m.add(r, r, 2.0 * c),
                    }
                };
                let a = vx.data[r];
                if a != 0.0 {
                    upwind(
                        &mut m,
                        a,
                        (i > 0).then(|| r - 1),
                        (i + 1 < nx).then(|| r + 1),
                    );
                }
                let b = vy.data[r];
                if b != 0.0 {
                    upwind(
                        &mut m,
                        b,
                        (j > 0).then(|| r - nx),
                        (j + 1 < ny).then(|| r + nx),
                    );
                }
            }
        }
        let z = m.factor()?.solve(&rhs);
        zeta = ScalarField { nx, ny, data: z };
        out.times.push(t);
        push(&mut out, zeta.clone());
    }
    Ok(out)
}

/// Centred differences with the antisymmetric wall ghost.
pub fn centred_gradient(d: &Domain, z: &ScalarField) -> (ScalarField, ScalarField) {
    let (nx, ny) = (d.nx, d.ny);
    let mut gx = ScalarField::zeros(d);
    let mut gy = ScalarField::zeros(d);
    let at = |i: isize, j: isize, own: f64| -> f64 {
        if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
            -own
        } else {
            z.get(i as usize, j as usize)
        }
    };
    for j in 0..ny {
        for i in 0..nx {
            let own = z.get(i, j);
            let (ii, jj) = (i as isize, j as isize);
            let k = d.cell(i, j);
            gx.data[k] = (at(ii + 1, jj, own) - at(ii - 1, jj, own)) / (2.0 * d.h);
            gy.data[k] = (at(ii, jj + 1, own) - at(ii, jj - 1, own)) / (2.0 * d.h);
        }
    }
    (gx, gy)
}
