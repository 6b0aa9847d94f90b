//! Exponential penalty `k_eps`, its antiderivative, and the penalized
//! viscosity fields built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarField;

/// Largest penalty value kept when `exp(1/eps^2) - 1` is not representable.
pub const OVERFLOW_CAP: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub eps: f64,
    /// Exponent of the regularizing power term `eps |Du|^(q-2) Du`.
    pub q: u32,
    pub cap: f64,
}

impl PenaltyParams {
    /// Validates `0 < eps < 1` and that `q` is odd with `(q - 1) / 2 >= 2`
    /// (this is `q > max(d + 1, 4)` with `(q - 1)/2` a natural number other
    /// than one, for `d = 2`).
    pub fn new(eps: f64, q: u32) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::InvalidParameter {
                name: "eps",
                reason: format!("must lie in (0, 1), got {eps}"),
            });
        }
        if q <= 4 || q.is_multiple_of(2) {
            return Err(Error::InvalidParameter {
                name: "q",
                reason: format!("need q > 4 with (q - 1)/2 an integer >= 2, got {q}"),
            });
        }
        let exact = (1.0 / (eps * eps)).exp_m1();
        let cap = if exact.is_finite() {
            exact.min(OVERFLOW_CAP)
        } else {
            OVERFLOW_CAP
        };
        Ok(Self { eps, q, cap })
    }

    pub fn with_eps(eps: f64) -> Result<Self> {
        Self::new(eps, 5)
    }

    /// Argument beyond which `k_eps` sits at its cap.
    fn saturation(&self) -> f64 {
        (self.eps * self.cap.ln_1p()).min(1.0 / self.eps)
    }
}

/// `0` for `s <= 0`, `exp(s/eps) - 1` on `(0, 1/eps)`, `exp(1/eps^2) - 1`
/// beyond, clamped at `p.cap`.
pub fn k_eps(s: f64, p: &PenaltyParams) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s < 1.0 / p.eps {
        (s / p.eps).exp_m1().min(p.cap)
    } else {
        p.cap
    }
}

/// Derivative of [`k_eps`]; zero where the penalty is constant.
pub fn k_eps_prime(s: f64, p: &PenaltyParams) -> f64 {
    if s <= 0.0 || s >= 1.0 / p.eps {
        return 0.0;
    }
    let e = (s / p.eps).exp();
    if e - 1.0 >= p.cap {
        0.0
    } else {
        e / p.eps
    }
}

/// `m_eps(s) = int_0^s k_eps`; zero for `s <= 0`.
pub fn m_eps(s: f64, p: &PenaltyParams) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let sat = p.saturation();
    let smooth = |x: f64| p.eps * (x / p.eps).exp_m1() - x;
    if s <= sat {
        smooth(s)
    } else {
        smooth(sat) + p.cap * (s - sat)
    }
}

/// Cellwise `k_eps(|Du|^2 - psi^2)`: the penalty viscosity and the discrete
/// multiplier candidate.
pub fn penalty_viscosity(
    du_norm: &ScalarField,
    psi: &ScalarField,
    p: &PenaltyParams,
) -> ScalarField {
    du_norm.zip_map(psi, |g, s| k_eps(g * g - s * s, p))
}

/// Cellwise `eps |Du|^(q-2)`.
pub fn q_viscosity(du_norm: &ScalarField, p: &PenaltyParams) -> ScalarField {
    let e = (p.q - 2) as i32;
    du_norm.map(|g| p.eps * g.powi(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Domain;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(eps: f64) -> PenaltyParams {
        PenaltyParams::with_eps(eps).unwrap()
    }

    #[test]
    fn piecewise_values() {
        assert_eq!(k_eps(-3.0, &p(0.2)), 0.0);
        let e = 0.3;
        assert_relative_eq!(k_eps(e * 2f64.ln(), &p(e)), 1.0, max_relative = 1e-14);
        assert_relative_eq!(k_eps(2.0, &p(0.5)), 4f64.exp() - 1.0, max_relative = 1e-14);
        assert_relative_eq!(
            k_eps(2.0, &p(0.5)),
            53.598150033144236,
            max_relative = 1e-12
        );
        assert_eq!(k_eps(50.0, &p(0.5)), 4f64.exp() - 1.0);
    }

    #[test]
    fn params_validation() {
        assert!(PenaltyParams::new(0.0, 5).is_err());
        assert!(PenaltyParams::new(1.0, 5).is_err());
        assert!(PenaltyParams::new(0.1, 4).is_err());
        assert!(PenaltyParams::new(0.1, 3).is_err());
        assert!(PenaltyParams::new(0.1, 6).is_err());
        assert!(PenaltyParams::new(0.1, 7).is_ok());
        // exp(1/eps^2) overflows for eps below ~0.0377
        assert_eq!(p(0.02).cap, OVERFLOW_CAP);
        assert_relative_eq!(p(0.5).cap, 4f64.exp() - 1.0);
    }

    #[test]
    fn antiderivative_closed_forms() {
        assert_eq!(m_eps(0.0, &p(0.3)), 0.0);
        assert_eq!(m_eps(-2.0, &p(0.3)), 0.0);
        let e = 0.25;
        assert_relative_eq!(
            m_eps(e, &p(e)),
            e * (std::f64::consts::E - 2.0),
            max_relative = 1e-13
        );
    }

    /// Composite Simpson quadrature of `k_eps`, independent of `m_eps`.
    fn simpson_k(s: f64, pp: &PenaltyParams) -> f64 {
        let n = 20_000;
        let hq = s / n as f64;
        let mut acc = k_eps(0.0, pp) + k_eps(s, pp);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * k_eps(i as f64 * hq, pp);
        }
        acc * hq / 3.0
    }

    #[test]
    fn antiderivative_matches_quadrature() {
        for &(eps, s) in &[
            (0.25, 0.25),
            (0.2, 0.7),
            (0.5, 1.5),
            (0.5, 3.0),
            (0.4, -1.0),
        ] {
            let pp = p(eps);
            let quad = if s > 0.0 { simpson_k(s, &pp) } else { 0.0 };
            let m = m_eps(s, &pp);
            assert!(
                (m - quad).abs() <= 1e-6 * quad.abs().max(1e-3),
                "eps={eps} s={s}: {m} vs {quad}"
            );
        }
    }

    #[test]
    fn derivative_of_antiderivative_is_k() {
        for &eps in &[0.1, 0.2, 0.4] {
            let pp = p(eps);
            for k in 1..40 {
                let s = k as f64 * 0.9 / (40.0 * eps) * eps;
                let hd = 1e-6 * eps;
                let fd = (m_eps(s + hd, &pp) - m_eps(s - hd, &pp)) / (2.0 * hd);
                assert_relative_eq!(fd, k_eps(s, &pp), max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        for &eps in &[0.1, 0.25, 0.5] {
            let pp = p(eps);
            for k in 1..30 {
                let s = k as f64 * 0.95 / (30.0 * eps);
                let hd = 1e-7 * eps;
                let fd = (k_eps(s + hd, &pp) - k_eps(s - hd, &pp)) / (2.0 * hd);
                if k_eps(s + hd, &pp) < pp.cap {
                    assert_relative_eq!(fd, k_eps_prime(s, &pp), max_relative = 1e-5);
                }
            }
            assert_eq!(k_eps_prime(-1.0, &pp), 0.0);
            assert_eq!(k_eps_prime(2.0 / eps, &pp), 0.0);
        }
    }

    #[test]
    fn monotone_bounded_on_fine_grid() {
        for &eps in &[0.08, 0.1, 0.3, 0.9] {
            let pp = p(eps);
            let bound = (1.0 / (eps * eps)).exp_m1().min(pp.cap);
            let mut prev = -1.0;
            for k in 0..10_000 {
                let s = -2.0 / eps + 4.0 / eps * k as f64 / 9_999.0;
                let v = k_eps(s, &pp);
                assert!(v >= prev, "not monotone at s={s}");
                assert!((0.0..=bound).contains(&v));
                prev = v;
            }
        }
    }

    #[test]
    fn viscosity_fields() {
        let d = Domain::unit_square(4).unwrap();
        let pp = p(0.1);
        let psi = ScalarField::constant(&d, 1.0);
        let below = ScalarField::constant(&d, 0.9);
        assert!(penalty_viscosity(&below, &psi, &pp)
            .data
            .iter()
            .all(|&v| v == 0.0));

        let mut g = below.clone();
        g.data[5] = (1.0 + 0.1 * 2f64.ln()).sqrt();
        let lam = penalty_viscosity(&g, &psi, &pp);
        assert_relative_eq!(lam.data[5], 1.0, max_relative = 1e-12);
        assert_eq!(lam.data.iter().filter(|&&v| v != 0.0).count(), 1);

        let active = ScalarField::from_fn(&d, |x, y| 0.8 + x + 0.5 * y);
        let lam = penalty_viscosity(&active, &psi, &pp);
        for (k, &v) in lam.data.iter().enumerate() {
            let a = active.data[k];
            assert_eq!(v, k_eps(a * a - 1.0, &pp));
        }

        assert!(q_viscosity(&ScalarField::zeros(&d), &pp)
            .data
            .iter()
            .all(|&v| v == 0.0));
        let one = q_viscosity(&ScalarField::constant(&d, 1.0), &pp);
        assert!(one.data.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let two = q_viscosity(&ScalarField::constant(&d, 2.0), &pp);
        assert_relative_eq!(two.data[0], 0.8, max_relative = 1e-14);
    }

    proptest! {
        #[test]
        fn penalty_is_nonnegative_and_vanishes_inside(g in 0.0f64..3.0, s in 0.1f64..3.0, eps in 0.05f64..0.95) {
            let pp = p(eps);
            let v = k_eps(g * g - s * s, &pp);
            prop_assert!(v >= 0.0);
            if g <= s {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
