//! Staggered (MAC) discretization of a rectangle with no-slip walls.
//!
//! Velocity components live on cell faces, scalars at cell centres. The
//! symmetric gradient has its diagonal at cell centres and its off-diagonal
//! at cell corners; cell values of the off-diagonal are the mean of the four
//! surrounding corners. Tangential wall values enter through mirrored ghosts.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::{conjugate_gradient, Csr, Triplets};

/// Rectangle `[0, lx] x [0, ly]` split into `nx * ny` square cells.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Domain {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
}

impl Domain {
    pub fn new(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::InvalidDomain(format!(
                "need at least 4x4 cells, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0) {
            return Err(Error::InvalidDomain(format!(
                "lengths must be positive, got {lx} x {ly}"
            )));
        }
        let hx = lx / nx as f64;
        let hy = ly / ny as f64;
        if ((hx - hy) / hx).abs() > 1e-12 {
            return Err(Error::InvalidDomain(format!(
                "cells must be square: lx/nx = {hx}, ly/ny = {hy}"
            )));
        }
        Ok(Self {
            lx,
            ly,
            nx,
            ny,
            h: hx,
        })
    }

    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(1.0, 1.0, n, n)
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_ux(&self) -> usize {
        (self.nx + 1) * self.ny
    }

    pub fn n_uy(&self) -> usize {
        self.nx * (self.ny + 1)
    }

    pub fn n_faces(&self) -> usize {
        self.n_ux() + self.n_uy()
    }

    pub fn n_corners(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    /// Number of interior corners, the unknowns of the stream-function basis.
    pub fn n_stream(&self) -> usize {
        (self.nx - 1) * (self.ny - 1)
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn corner(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// Flat index of the x-face `(i, j)` at `(i h, (j + 1/2) h)`.
    #[inline]
    pub fn ux(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// Flat index of the y-face `(i, j)` at `((i + 1/2) h, j h)`.
    #[inline]
    pub fn uy(&self, i: usize, j: usize) -> usize {
        self.n_ux() + j * self.nx + i
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.h, (j as f64 + 0.5) * self.h)
    }
}

/// Cell-centred scalar lattice, row-major in `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(d: &Domain) -> Self {
        Self::constant(d, 0.0)
    }

    pub fn constant(d: &Domain, c: f64) -> Self {
        Self {
            nx: d.nx,
            ny: d.ny,
            data: vec![c; d.n_cells()],
        }
    }

    pub fn from_fn(d: &Domain, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(d.n_cells());
        for j in 0..d.ny {
            for i in 0..d.nx {
                let (x, y) = d.cell_center(i, j);
                data.push(f(x, y));
            }
        }
        Self {
            nx: d.nx,
            ny: d.ny,
            data,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.nx + i]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            nx: self.nx,
            ny: self.ny,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.data.len(), other.data.len());
        Self {
            nx: self.nx,
            ny: self.ny,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `h^2`-weighted sum, the discrete integral over the domain.
    pub fn integral(&self, h: f64) -> f64 {
        self.data.iter().sum::<f64>() * h * h
    }

    pub fn inner(&self, other: &Self, h: f64) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * h
            * h
    }
}

/// Face-centred velocity. Wall-normal faces are zero for every valid field.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub nx: usize,
    pub ny: usize,
    /// `(nx + 1) * ny` x-face values.
    pub ux: Vec<f64>,
    /// `nx * (ny + 1)` y-face values.
    pub uy: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(d: &Domain) -> Self {
        Self {
            nx: d.nx,
            ny: d.ny,
            ux: vec![0.0; d.n_ux()],
            uy: vec![0.0; d.n_uy()],
        }
    }

    /// Samples `f(x, y) = (fx, fy)` on the faces; wall-normal faces stay zero.
    pub fn from_fn(d: &Domain, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> Self {
        let mut u = Self::zeros(d);
        let h = d.h;
        for j in 0..d.ny {
            for i in 1..d.nx {
                u.ux[j * (d.nx + 1) + i] = f(i as f64 * h, (j as f64 + 0.5) * h).0;
            }
        }
        for j in 1..d.ny {
            for i in 0..d.nx {
                u.uy[j * d.nx + i] = f((i as f64 + 0.5) * h, j as f64 * h).1;
            }
        }
        u
    }

    pub fn from_flat(d: &Domain, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), d.n_faces());
        Self {
            nx: d.nx,
            ny: d.ny,
            ux: flat[..d.n_ux()].to_vec(),
            uy: flat[d.n_ux()..].to_vec(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.ux.len() + self.uy.len());
        v.extend_from_slice(&self.ux);
        v.extend_from_slice(&self.uy);
        v
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.ux.iter().chain(&self.uy).copied()
    }

    pub fn linf(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.combine(self, |a, _| s * a)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.combine(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.combine(other, |a, b| a + b)
    }

    pub fn combine(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.nx, self.ny), (other.nx, other.ny));
        Self {
            nx: self.nx,
            ny: self.ny,
            ux: self
                .ux
                .iter()
                .zip(&other.ux)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            uy: self
                .uy
                .iter()
                .zip(&other.uy)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Velocity averaged to cell centres.
    pub fn cell_centered(&self) -> (ScalarField, ScalarField) {
        let (nx, ny) = (self.nx, self.ny);
        let mut cx = Vec::with_capacity(nx * ny);
        let mut cy = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                cx.push(0.5 * (self.ux[j * (nx + 1) + i] + self.ux[j * (nx + 1) + i + 1]));
                cy.push(0.5 * (self.uy[j * nx + i] + self.uy[(j + 1) * nx + i]));
            }
        }
        (
            ScalarField { nx, ny, data: cx },
            ScalarField { nx, ny, data: cy },
        )
    }
}

/// Cell-centred symmetric 2x2 tensor; `xy` stores both off-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub xx: ScalarField,
    pub xy: ScalarField,
    pub yy: ScalarField,
}

/// Frobenius norm per cell.
pub fn tensor_norm(t: &TensorField) -> ScalarField {
    let mut out = t.xx.clone();
    for (k, v) in out.data.iter_mut().enumerate() {
        let (a, b, c) = (t.xx.data[k], t.xy.data[k], t.yy.data[k]);
        *v = (a * a + c * c + 2.0 * b * b).sqrt();
    }
    out
}

/// Discrete `l2` and `linf` norms of a velocity field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub l2: f64,
    pub linf: f64,
}

#[derive(Debug)]
struct Operators {
    /// Rows: cell D11, cell D22, corner D12.
    sym_grad: Csr,
    /// Corner D12 averaged to cells.
    corner_to_cell: Csr,
    /// Faces -> cells.
    div: Csr,
    /// Cells -> faces (zero on walls).
    grad: Csr,
    /// Interior corners -> faces.
    curl: Csr,
    /// `curl` followed by `sym_grad`.
    sym_grad_curl: Csr,
    /// `(#adjacent cells) / 4` per corner.
    corner_weight: Vec<f64>,
    /// Adjacent cells of every corner.
    corner_cells: Vec<Vec<usize>>,
}

/// A [`Domain`] together with its assembled difference operators.
/// Cloning is cheap; the operators are shared.
#[derive(Debug, Clone)]
pub struct Grid {
    pub domain: Domain,
    ops: Arc<Operators>,
}

impl Grid {
    pub fn new(domain: Domain) -> Self {
        let ops = Arc::new(build_operators(&domain));
        Self { domain, ops }
    }

    pub fn h(&self) -> f64 {
        self.domain.h
    }

    pub fn sym_gradient(&self, u: &VelocityField) -> TensorField {
        let d = &self.domain;
        let g = self.ops.sym_grad.matvec(&u.to_flat());
        let nc = d.n_cells();
        let xy = self.ops.corner_to_cell.matvec(&g[2 * nc..]);
        TensorField {
            xx: ScalarField {
                nx: d.nx,
                ny: d.ny,
                data: g[..nc].to_vec(),
            },
            yy: ScalarField {
                nx: d.nx,
                ny: d.ny,
                data: g[nc..2 * nc].to_vec(),
            },
            xy: ScalarField {
                nx: d.nx,
                ny: d.ny,
                data: xy,
            },
        }
    }

    /// `|Du|` per cell.
    pub fn strain_norm(&self, u: &VelocityField) -> ScalarField {
        tensor_norm(&self.sym_gradient(u))
    }

    pub fn divergence(&self, u: &VelocityField) -> ScalarField {
        let d = &self.domain;
        ScalarField {
            nx: d.nx,
            ny: d.ny,
            data: self.ops.div.matvec(&u.to_flat()),
        }
    }

    /// Cell-to-face gradient, zero on wall-normal faces.
    pub fn gradient(&self, phi: &ScalarField) -> VelocityField {
        VelocityField::from_flat(&self.domain, &self.ops.grad.matvec(&phi.data))
    }

    /// Skew-symmetric convection `C(w) u` with `C = (N - N^T) / 2`, `N` the
    /// centred advective operator `(w . grad)`. Consistent with
    /// `((w . grad) u + div(w (x) u)) / 2` for divergence-free `w`.
    pub fn convection_operator(&self, w: &VelocityField) -> Csr {
        let n = advection_matrix(&self.domain, w);
        n.add_scaled(0.5, &n.transpose(), -0.5)
    }

    pub fn convection(&self, u: &VelocityField) -> VelocityField {
        self.convection_with(u, u)
    }

    /// Convection of `u` transported by `w`.
    pub fn convection_with(&self, w: &VelocityField, u: &VelocityField) -> VelocityField {
        let c = self.convection_operator(w);
        VelocityField::from_flat(&self.domain, &c.matvec(&u.to_flat()))
    }

    /// Weights of the viscous quadratic form for a cell-centred coefficient:
    /// `eta` on the D11/D22 rows and `2 w_c eta_c` on corner D12 rows, with
    /// `eta_c` the mean of the adjacent cells.
    pub fn viscous_weights(&self, eta: &ScalarField) -> Vec<f64> {
        let nc = self.domain.n_cells();
        let mut w = Vec::with_capacity(2 * nc + self.domain.n_corners());
        w.extend_from_slice(&eta.data);
        w.extend_from_slice(&eta.data);
        for (cells, &wc) in self.ops.corner_cells.iter().zip(&self.ops.corner_weight) {
            let mean = cells.iter().map(|&c| eta.data[c]).sum::<f64>() / cells.len() as f64;
            w.push(2.0 * wc * mean);
        }
        w
    }

    /// `div(eta D u)` as `-G^T W(eta) G u`; self-adjoint and negative
    /// semidefinite in the face inner product.
    pub fn viscous_divergence(&self, eta: &ScalarField, u: &VelocityField) -> VelocityField {
        let w = self.viscous_weights(eta);
        let mut g = self.ops.sym_grad.matvec(&u.to_flat());
        g.iter_mut().zip(&w).for_each(|(g, w)| *g *= -w);
        VelocityField::from_flat(&self.domain, &self.ops.sym_grad.matvec_transpose(&g))
    }

    /// Helmholtz projection onto discretely divergence-free fields.
    /// Returns the projected velocity and `phi / dt` as a pressure proxy.
    pub fn project(&self, u: &VelocityField, dt: f64) -> Result<(VelocityField, ScalarField)> {
        let d = &self.domain;
        let mut rhs = self.ops.div.matvec(&u.to_flat());
        let mean = rhs.iter().sum::<f64>() / rhs.len() as f64;
        rhs.iter_mut().for_each(|v| *v = -(*v - mean));
        let mut phi = vec![0.0; d.n_cells()];
        let neg_lap = |p: &[f64]| -> Vec<f64> {
            let g = self.ops.grad.matvec(p);
            self.ops.div.matvec(&g).into_iter().map(|v| -v).collect()
        };
        conjugate_gradient(neg_lap, &rhs, &mut phi, 1e-12, 10 * d.n_cells())?;
        let pm = phi.iter().sum::<f64>() / phi.len() as f64;
        phi.iter_mut().for_each(|v| *v -= pm);
        let g = self.ops.grad.matvec(&phi);
        let mut flat = u.to_flat();
        flat.iter_mut().zip(&g).for_each(|(a, b)| *a -= b);
        let proj = VelocityField::from_flat(d, &flat);
        let pressure = ScalarField {
            nx: d.nx,
            ny: d.ny,
            data: phi.iter().map(|v| v / dt).collect(),
        };
        Ok((proj, pressure))
    }

    /// `h^2`-weighted face inner product.
    pub fn inner(&self, u: &VelocityField, v: &VelocityField) -> f64 {
        let h2 = self.domain.h * self.domain.h;
        u.values().zip(v.values()).map(|(a, b)| a * b).sum::<f64>() * h2
    }

    pub fn norms(&self, u: &VelocityField) -> Norms {
        Norms {
            l2: self.inner(u, u).sqrt(),
            linf: u.linf(),
        }
    }

    /// Velocity of the discrete stream function given on interior corners.
    pub fn curl(&self, stream: &[f64]) -> VelocityField {
        VelocityField::from_flat(&self.domain, &self.ops.curl.matvec(stream))
    }

    /// Face matrix of the stream-function basis.
    pub fn curl_matrix(&self) -> &Csr {
        &self.ops.curl
    }

    /// Symmetric-gradient rows (cell D11, cell D22, corner D12) of the
    /// stream-function basis.
    pub fn sym_grad_curl_matrix(&self) -> &Csr {
        &self.ops.sym_grad_curl
    }
}

fn build_operators(d: &Domain) -> Operators {
    let (nx, ny, h) = (d.nx, d.ny, d.h);
    let nc = d.n_cells();
    let inv_h = 1.0 / h;

    let mut sg = Triplets::new(2 * nc + d.n_corners(), d.n_faces());
    for j in 0..ny {
        for i in 0..nx {
            let c = d.cell(i, j);
            if i + 1 < nx {
                sg.push(c, d.ux(i + 1, j), inv_h);
            }
            if i > 0 {
                sg.push(c, d.ux(i, j), -inv_h);
            }
            if j + 1 < ny {
                sg.push(nc + c, d.uy(i, j + 1), inv_h);
            }
            if j > 0 {
                sg.push(nc + c, d.uy(i, j), -inv_h);
            }
        }
    }
    for j in 0..=ny {
        for i in 0..=nx {
            let r = 2 * nc + d.corner(i, j);
            // 0.5 * d(ux)/dy
            if i > 0 && i < nx {
                if j == 0 {
                    sg.push(r, d.ux(i, 0), inv_h);
                } else if j == ny {
                    sg.push(r, d.ux(i, ny - 1), -inv_h);
                } else {
                    sg.push(r, d.ux(i, j), 0.5 * inv_h);
                    sg.push(r, d.ux(i, j - 1), -0.5 * inv_h);
                }
            }
            // 0.5 * d(uy)/dx
            if j > 0 && j < ny {
                if i == 0 {
                    sg.push(r, d.uy(0, j), inv_h);
                } else if i == nx {
                    sg.push(r, d.uy(nx - 1, j), -inv_h);
                } else {
                    sg.push(r, d.uy(i, j), 0.5 * inv_h);
                    sg.push(r, d.uy(i - 1, j), -0.5 * inv_h);
                }
            }
        }
    }
    let sym_grad = sg.into_csr();

    let mut avg = Triplets::new(nc, d.n_corners());
    for j in 0..ny {
        for i in 0..nx {
            for (a, b) in [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                avg.push(d.cell(i, j), d.corner(a, b), 0.25);
            }
        }
    }
    let corner_to_cell = avg.into_csr();

    let mut corner_cells = Vec::with_capacity(d.n_corners());
    for j in 0..=ny {
        for i in 0..=nx {
            let mut cells = Vec::with_capacity(4);
            for (a, b) in [
                (i.wrapping_sub(1), j.wrapping_sub(1)),
                (i, j.wrapping_sub(1)),
                (i.wrapping_sub(1), j),
                (i, j),
            ] {
                if a < nx && b < ny {
                    cells.push(d.cell(a, b));
                }
            }
            corner_cells.push(cells);
        }
    }
    let corner_weight = corner_cells.iter().map(|c| c.len() as f64 / 4.0).collect();

    let mut dv = Triplets::new(nc, d.n_faces());
    for j in 0..ny {
        for i in 0..nx {
            let c = d.cell(i, j);
            dv.push(c, d.ux(i + 1, j), inv_h);
            dv.push(c, d.ux(i, j), -inv_h);
            dv.push(c, d.uy(i, j + 1), inv_h);
            dv.push(c, d.uy(i, j), -inv_h);
        }
    }
    let div = dv.into_csr();

    let mut gr = Triplets::new(d.n_faces(), nc);
    for j in 0..ny {
        for i in 1..nx {
            gr.push(d.ux(i, j), d.cell(i, j), inv_h);
            gr.push(d.ux(i, j), d.cell(i - 1, j), -inv_h);
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            gr.push(d.uy(i, j), d.cell(i, j), inv_h);
            gr.push(d.uy(i, j), d.cell(i, j - 1), -inv_h);
        }
    }
    let grad = gr.into_csr();

    let stream = |i: usize, j: usize| -> Option<usize> {
        (i >= 1 && i < nx && j >= 1 && j < ny).then(|| (j - 1) * (nx - 1) + (i - 1))
    };
    let mut cu = Triplets::new(d.n_faces(), d.n_stream());
    for j in 0..ny {
        for i in 1..nx {
            if let Some(s) = stream(i, j + 1) {
                cu.push(d.ux(i, j), s, inv_h);
            }
            if let Some(s) = stream(i, j) {
                cu.push(d.ux(i, j), s, -inv_h);
            }
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            if let Some(s) = stream(i + 1, j) {
                cu.push(d.uy(i, j), s, -inv_h);
            }
            if let Some(s) = stream(i, j) {
                cu.push(d.uy(i, j), s, inv_h);
            }
        }
    }
    let curl = cu.into_csr();
    let sym_grad_curl = sym_grad.matmul(&curl);

    Operators {
        sym_grad,
        corner_to_cell,
        div,
        grad,
        curl,
        sym_grad_curl,
        corner_weight,
        corner_cells,
    }
}

/// Centred advective operator `(w . grad)` on interior faces, mirrored
/// ghosts for tangential wall values.
fn advection_matrix(d: &Domain, w: &VelocityField) -> Csr {
    let (nx, ny) = (d.nx, d.ny);
    let s = 0.5 / d.h;
    let wux = |i: usize, j: usize| w.ux[j * (nx + 1) + i];
    let wuy = |i: usize, j: usize| w.uy[j * nx + i];
    let mut t = Triplets::new(d.n_faces(), d.n_faces());
    for j in 0..ny {
        for i in 1..nx {
            let r = d.ux(i, j);
            let a = wux(i, j);
            let b = 0.25 * (wuy(i - 1, j) + wuy(i, j) + wuy(i - 1, j + 1) + wuy(i, j + 1));
            if i + 1 < nx {
                t.push(r, d.ux(i + 1, j), a * s);
            }
            if i > 1 {
                t.push(r, d.ux(i - 1, j), -a * s);
            }
            if j + 1 < ny {
                t.push(r, d.ux(i, j + 1), b * s);
            } else {
                t.push(r, d.ux(i, j), -b * s);
            }
            if j > 0 {
                t.push(r, d.ux(i, j - 1), -b * s);
            } else {
                t.push(r, d.ux(i, j), b * s);
            }
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            let r = d.uy(i, j);
            let a = 0.25 * (wux(i, j - 1) + wux(i + 1, j - 1) + wux(i, j) + wux(i + 1, j));
            let b = wuy(i, j);
            if i + 1 < nx {
                t.push(r, d.uy(i + 1, j), a * s);
            } else {
                t.push(r, d.uy(i, j), -a * s);
            }
            if i > 0 {
                t.push(r, d.uy(i - 1, j), -a * s);
            } else {
                t.push(r, d.uy(i, j), a * s);
            }
            if j + 1 < ny {
                t.push(r, d.uy(i, j + 1), b * s);
            }
            if j > 1 {
                t.push(r, d.uy(i, j - 1), -b * s);
            }
        }
    }
    t.into_csr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Grid {
        Grid::new(Domain::unit_square(n).unwrap())
    }

    fn random_field(g: &Grid, seed: u64) -> VelocityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = &g.domain;
        let stream: Vec<f64> = (0..d.n_stream())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        g.curl(&stream)
    }

    fn random_raw(g: &Grid, seed: u64) -> VelocityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VelocityField::from_fn(&g.domain, |_, _| {
            (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    /// Stream function sin^2(pi x) sin^2(pi y) and its velocity (s_y, -s_x).
    fn stream_fn(x: f64, y: f64) -> f64 {
        (PI * x).sin().powi(2) * (PI * y).sin().powi(2)
    }

    fn stream_velocity(x: f64, y: f64) -> (f64, f64) {
        let sx = PI * (2.0 * PI * x).sin() * (PI * y).sin().powi(2);
        let sy = PI * (PI * x).sin().powi(2) * (2.0 * PI * y).sin();
        (sy, -sx)
    }

    fn sampled_stream(g: &Grid) -> VelocityField {
        let d = &g.domain;
        let mut s = Vec::with_capacity(d.n_stream());
        for j in 1..d.ny {
            for i in 1..d.nx {
                s.push(stream_fn(i as f64 * d.h, j as f64 * d.h));
            }
        }
        g.curl(&s)
    }

    #[test]
    fn domain_validation() {
        assert!(Domain::new(1.0, 1.0, 3, 8).is_err());
        assert!(Domain::new(1.0, 2.0, 8, 8).is_err());
        assert!(Domain::new(1.0, 2.0, 8, 16).is_ok());
        assert!(Domain::new(-1.0, 1.0, 8, 8).is_err());
    }

    #[test]
    fn zero_field_has_zero_derivatives() {
        let g = grid(8);
        let u = VelocityField::zeros(&g.domain);
        let t = g.sym_gradient(&u);
        assert!(tensor_norm(&t).data.iter().all(|&v| v == 0.0));
        assert_eq!(g.divergence(&u).max_abs(), 0.0);
        assert_eq!(g.convection(&u).linf(), 0.0);
        assert_eq!(
            g.viscous_divergence(&ScalarField::constant(&g.domain, 2.0), &u)
                .linf(),
            0.0
        );
        let n = g.norms(&u);
        assert_eq!((n.l2, n.linf), (0.0, 0.0));
    }

    fn shear_d12_error(n: usize) -> f64 {
        let g = grid(n);
        let d = g.domain;
        let u = VelocityField::from_fn(&d, |x, y| (y * (1.0 - y) * x * (1.0 - x), 0.0));
        let t = g.sym_gradient(&u);
        let mut err: f64 = 0.0;
        for j in 1..d.ny - 1 {
            for i in 1..d.nx - 1 {
                let (x, y) = d.cell_center(i, j);
                let exact = 0.5 * x * (1.0 - x) * (1.0 - 2.0 * y);
                err = err.max((t.xy.get(i, j) - exact).abs());
            }
        }
        err
    }

    #[test]
    fn sym_gradient_second_order_in_interior() {
        let e1 = shear_d12_error(16);
        let e2 = shear_d12_error(32);
        let e3 = shear_d12_error(64);
        assert!(e1 / e2 > 3.5 && e2 / e3 > 3.5, "{e1} {e2} {e3}");
    }

    #[test]
    fn rigid_rotation_is_strain_free() {
        let g = grid(16);
        let d = g.domain;
        let band = 2.0 * d.h;
        let inside = |x: f64, y: f64| x > band && x < 1.0 - band && y > band && y < 1.0 - band;
        let u = VelocityField::from_fn(&d, |x, y| {
            if inside(x, y) {
                (-y + 0.3, x + 0.7)
            } else {
                (0.0, 0.0)
            }
        });
        let norm = g.strain_norm(&u);
        for j in 4..d.ny - 4 {
            for i in 4..d.nx - 4 {
                assert!(norm.get(i, j) < 1e-12);
            }
        }
    }

    #[test]
    fn tensor_norm_examples() {
        let d = Domain::unit_square(4).unwrap();
        let one = ScalarField::constant(&d, 1.0);
        let zero = ScalarField::zeros(&d);
        let id = TensorField {
            xx: one.clone(),
            xy: zero.clone(),
            yy: one.clone(),
        };
        assert!(tensor_norm(&id)
            .data
            .iter()
            .all(|&v| (v - 2f64.sqrt()).abs() < 1e-15));
        let z = TensorField {
            xx: zero.clone(),
            xy: zero.clone(),
            yy: zero.clone(),
        };
        assert_eq!(tensor_norm(&z).max(), 0.0);
        let ones = TensorField {
            xx: one.clone(),
            xy: one.clone(),
            yy: one,
        };
        assert!(tensor_norm(&ones)
            .data
            .iter()
            .all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn divergence_examples() {
        let g = grid(10);
        let d = g.domain;
        let hyper = VelocityField::from_fn(&d, |x, y| (x, -y));
        let dv = g.divergence(&hyper);
        let stretch = g.divergence(&VelocityField::from_fn(&d, |x, _| (x, 0.0)));
        for j in 1..d.ny - 1 {
            for i in 1..d.nx - 1 {
                assert!(dv.get(i, j).abs() < 1e-12);
                assert!((stretch.get(i, j) - 1.0).abs() < 1e-12);
            }
        }
        let curl = random_field(&g, 3);
        assert!(g.divergence(&curl).max_abs() < 1e-12);
    }

    #[test]
    fn summation_by_parts() {
        let g = grid(12);
        let d = g.domain;
        let u = random_raw(&g, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let phi = ScalarField::from_fn(&d, |_, _| rng.gen_range(-1.0..1.0));
        let lhs = g.divergence(&u).inner(&phi, d.h);
        let rhs = -g.inner(&u, &g.gradient(&phi));
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn convection_is_energy_neutral() {
        let g = grid(16);
        for seed in 0..5 {
            let u = random_field(&g, seed);
            let c = g.convection(&u);
            let n2 = g.inner(&u, &u);
            assert!(g.inner(&c, &u).abs() <= 1e-12 * n2, "seed {seed}");
        }
    }

    fn convection_error(n: usize) -> f64 {
        let g = grid(n);
        let d = g.domain;
        let u = sampled_stream(&g);
        let c = g.convection(&u);
        // (u . grad) u by finite differences of the analytic field.
        let fd = 1e-5;
        let adv = |x: f64, y: f64| {
            let (a, b) = stream_velocity(x, y);
            let dx = |k: usize| {
                let p = stream_velocity(x + fd, y);
                let m = stream_velocity(x - fd, y);
                if k == 0 {
                    (p.0 - m.0) / (2.0 * fd)
                } else {
                    (p.1 - m.1) / (2.0 * fd)
                }
            };
            let dy = |k: usize| {
                let p = stream_velocity(x, y + fd);
                let m = stream_velocity(x, y - fd);
                if k == 0 {
                    (p.0 - m.0) / (2.0 * fd)
                } else {
                    (p.1 - m.1) / (2.0 * fd)
                }
            };
            (a * dx(0) + b * dy(0), a * dx(1) + b * dy(1))
        };
        let mut err: f64 = 0.0;
        let q = d.nx / 4;
        for j in q..d.ny - q {
            for i in q..d.nx - q {
                let (x, y) = (i as f64 * d.h, (j as f64 + 0.5) * d.h);
                err = err.max((c.ux[d.ux(i, j)] - adv(x, y).0).abs());
                let (x, y) = ((i as f64 + 0.5) * d.h, j as f64 * d.h);
                err = err.max((c.uy[d.uy(i, j) - d.n_ux()] - adv(x, y).1).abs());
            }
        }
        err
    }

    #[test]
    fn convection_second_order_in_interior() {
        let e1 = convection_error(16);
        let e2 = convection_error(32);
        assert!(e1 / e2 > 3.0, "{e1} {e2}");
    }

    #[test]
    fn viscous_constant_coefficient_matches_stencil() {
        let g = grid(12);
        let d = g.domain;
        let c = 1.7;
        let u = random_raw(&g, 11);
        let v = g.viscous_divergence(&ScalarField::constant(&d, c), &u);
        let ux = |i: usize, j: usize| u.ux[d.ux(i, j)];
        let uy = |i: usize, j: usize| u.uy[d.uy(i, j) - d.n_ux()];
        let h2 = d.h * d.h;
        // div(c D u)_x = c (u_xx + (u_yy + v_xy)/2)
        for j in 1..d.ny - 1 {
            for i in 2..d.nx - 1 {
                let uxx = (ux(i + 1, j) - 2.0 * ux(i, j) + ux(i - 1, j)) / h2;
                let uyy = (ux(i, j + 1) - 2.0 * ux(i, j) + ux(i, j - 1)) / h2;
                let vxy = (uy(i, j + 1) - uy(i - 1, j + 1) - uy(i, j) + uy(i - 1, j)) / h2;
                let expect = c * (uxx + 0.5 * (uyy + vxy));
                assert!((v.ux[d.ux(i, j)] - expect).abs() < 1e-9 * expect.abs().max(1.0));
            }
        }
        // wall-normal faces untouched
        for j in 0..d.ny {
            assert_eq!(v.ux[d.ux(0, j)], 0.0);
            assert_eq!(v.ux[d.ux(d.nx, j)], 0.0);
        }
    }

    #[test]
    fn viscous_operator_is_self_adjoint_and_dissipative() {
        let g = grid(12);
        let d = g.domain;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eta = ScalarField::from_fn(&d, |_, _| rng.gen_range(0.0..3.0));
        let u = random_raw(&g, 1);
        let v = random_raw(&g, 2);
        let a = g.inner(&g.viscous_divergence(&eta, &u), &v);
        let b = g.inner(&u, &g.viscous_divergence(&eta, &v));
        assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
        assert!(g.inner(&g.viscous_divergence(&eta, &u), &u) <= 0.0);
    }

    fn sbp_gap(n: usize) -> f64 {
        let g = grid(n);
        let d = g.domain;
        let eta = ScalarField::from_fn(&d, |x, y| 1.0 + x * y);
        let u = sampled_stream(&g);
        let lhs = g.inner(&g.viscous_divergence(&eta, &u), &u);
        let du = g.strain_norm(&u);
        let rhs = -du.zip_map(&eta, |a, e| e * a * a).integral(d.h);
        // the cell form never exceeds the corner form
        assert!(-lhs >= -rhs - 1e-12);
        ((lhs - rhs) / rhs).abs()
    }

    #[test]
    fn viscous_energy_matches_cell_dissipation() {
        let g1 = sbp_gap(16);
        let g2 = sbp_gap(32);
        assert!(g1 < 0.05 && g2 < g1 / 3.0, "{g1} {g2}");
    }

    #[test]
    fn projection_properties() {
        let g = grid(16);
        let d = g.domain;
        let free = random_field(&g, 4);
        let (p, _) = g.project(&free, 1.0).unwrap();
        assert!(p.sub(&free).linf() <= 1e-10 * free.linf());

        let phi0 = ScalarField::from_fn(&d, |x, y| (PI * x).cos() * (2.0 * PI * y).cos());
        let grad = g.gradient(&phi0);
        let (p, pressure) = g.project(&grad, 0.5).unwrap();
        assert!(p.linf() < 1e-9 * grad.linf());
        let mean = phi0.data.iter().sum::<f64>() / phi0.data.len() as f64;
        for (a, b) in pressure.data.iter().zip(&phi0.data) {
            assert!((a * 0.5 - (b - mean)).abs() < 1e-8);
        }

        let raw = random_raw(&g, 9);
        let (p1, _) = g.project(&raw, 1.0).unwrap();
        let div_tol = 1e-10 * raw.linf() / d.h;
        assert!(g.divergence(&p1).max_abs() <= div_tol);
        let (p2, _) = g.project(&p1, 1.0).unwrap();
        assert!(p2.sub(&p1).linf() <= 1e-10 * p1.linf());
    }

    #[test]
    fn norm_of_unit_field() {
        let g = grid(20);
        let u = VelocityField::from_fn(&g.domain, |_, _| (1.0, 1.0));
        let n = g.norms(&u);
        // (n - 1) n interior faces per component
        assert!((n.l2 - (2.0 * 19.0 / 20.0f64).sqrt()).abs() < 1e-12);
        assert!((n.l2 - 2f64.sqrt()).abs() < 0.05);
        assert_eq!(n.linf, 1.0);
    }

    proptest! {
        #[test]
        fn cauchy_schwarz(s1 in 0u64..1000, s2 in 0u64..1000) {
            let g = grid(6);
            let u = random_raw(&g, s1);
            let v = random_raw(&g, s2);
            prop_assert!(g.inner(&u, &v).abs() <= g.norms(&u).l2 * g.norms(&v).l2 * (1.0 + 1e-12));
        }

        #[test]
        fn projected_fields_are_divergence_free(seed in 0u64..1000) {
            let g = grid(8);
            let u = random_raw(&g, seed);
            let (p, _) = g.project(&u, 1.0).unwrap();
            prop_assert!(g.divergence(&p).max_abs() <= 1e-10 * u.linf() / g.h());
            let c = g.convection(&p);
            prop_assert!(g.inner(&c, &p).abs() <= 1e-12 * g.inner(&p, &p));
        }
    }
}
