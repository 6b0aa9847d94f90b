//! Experiment configuration: a sectioned TOML document resolved into solver
//! objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::expr::Expr;
use crate::constraints::{
    mollify, Kernel, KernelFunctional, NormFunctional, ParabolicCoupling, ThresholdBounds,
    ThresholdProvider, ThresholdSource,
};
use crate::error::{Error, Result};
use crate::grid::{Domain, Grid, VelocityField};
use crate::penalty::PenaltyParams;
use crate::stepper::{ForceProvider, InnerSolver, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainSpec,
    pub solver: SolverSpec,
    pub threshold: ThresholdSpec,
    #[serde(default)]
    pub forcing: ForcingSpec,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub depend: DependSpec,
    #[serde(default)]
    pub qvi: QviSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default = "one")]
    pub lx: f64,
    #[serde(default = "one")]
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub nu: f64,
    pub eps: f64,
    #[serde(default = "default_q")]
    pub q: u32,
    /// Time step; `h/4` when absent.
    pub dt: Option<f64>,
    /// Number of steps; alternatively give `t_end`.
    pub steps: Option<usize>,
    pub t_end: Option<f64>,
    pub picard_tol: Option<f64>,
    pub picard_max: Option<usize>,
    pub relax: Option<f64>,
    pub inner: Option<InnerSolver>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    Constant,
    Analytic,
    Norm,
    Kernel,
    Parabolic,
}

/// Threshold section. `psi_star` and `psi_upper` are always required;
/// the remaining keys depend on `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSpec {
    pub kind: ThresholdKind,
    pub psi_star: f64,
    pub psi_upper: f64,
    /// `constant`: the value.
    pub value: Option<f64>,
    /// `analytic`: expression in `x y t`.
    pub expr: Option<String>,
    /// `norm`: `Psi[w] = phi (alpha + beta |Dw|^2)`; `beta` is calibrated
    /// against the contraction budget when absent.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// `norm` and `kernel`: the outer function.
    pub phi: Option<String>,
    /// `kernel`: separable factors `K = target(x, t) source(y, s)`.
    pub target: Option<String>,
    pub source: Option<String>,
    /// `parabolic`: coefficients, data and outer function.
    pub a11: Option<String>,
    pub a12: Option<String>,
    pub a22: Option<String>,
    pub zeta0: Option<String>,
    pub outer: Option<String>,
    /// Mollify a given threshold with this parameter `n`.
    pub mollify_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingSpec {
    #[serde(default = "zero_expr")]
    pub fx: String,
    #[serde(default = "zero_expr")]
    pub fy: String,
}

impl Default for ForcingSpec {
    fn default() -> Self {
        Self {
            fx: zero_expr(),
            fy: zero_expr(),
        }
    }
}

/// Initial velocity as the discrete curl of a stream function sampled at
/// interior corners, plus optional seeded noise in the stream values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default = "zero_expr")]
    pub stream: String,
    #[serde(default)]
    pub noise: f64,
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self {
            stream: zero_expr(),
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_eps_sweep")]
    pub eps: Vec<f64>,
    #[serde(default = "default_nu_sweep")]
    pub nu: Vec<f64>,
    /// Grid sizes for refinement studies.
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default = "default_deltas")]
    pub delta: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            eps: default_eps_sweep(),
            nu: default_nu_sweep(),
            n: Vec::new(),
            delta: default_deltas(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependSpec {
    /// Shape of the threshold perturbation; the second threshold is
    /// `psi + delta * perturbation`.
    #[serde(default = "one_expr")]
    pub perturbation: String,
}

impl Default for DependSpec {
    fn default() -> Self {
        Self {
            perturbation: one_expr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QviSpec {
    #[serde(default = "default_qvi_tol")]
    pub tol: f64,
    #[serde(default = "default_qvi_maxiter")]
    pub maxiter: usize,
    /// Korn-Sobolev constant `K_p` and exponent `p`; a pilot run estimates
    /// the sup norm when absent.
    pub korn_k: Option<f64>,
    pub korn_p: Option<f64>,
    /// Contraction left-hand side targeted when calibrating `beta`.
    #[serde(default = "default_target")]
    pub target_lhs: f64,
}

impl Default for QviSpec {
    fn default() -> Self {
        Self {
            tol: default_qvi_tol(),
            maxiter: default_qvi_maxiter(),
            korn_k: None,
            korn_p: None,
            target_lhs: default_target(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default = "default_oracle_n")]
    pub n: usize,
    #[serde(default = "default_oracle_nu")]
    pub nu: f64,
    #[serde(default = "default_oracle_t")]
    pub t_end: f64,
    #[serde(default = "default_oracle_steps")]
    pub steps: usize,
    #[serde(default = "default_oracle_psi")]
    pub psi: String,
    #[serde(default = "default_oracle_f")]
    pub f: String,
    #[serde(default = "default_oracle_eps")]
    pub eps: Vec<f64>,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            n: default_oracle_n(),
            nu: default_oracle_nu(),
            t_end: default_oracle_t(),
            steps: default_oracle_steps(),
            psi: default_oracle_psi(),
            f: default_oracle_f(),
            eps: default_oracle_eps(),
        }
    }
}

fn one() -> f64 {
    1.0
}
fn default_q() -> u32 {
    5
}
fn zero_expr() -> String {
    "0".into()
}
fn one_expr() -> String {
    "1".into()
}
fn default_eps_sweep() -> Vec<f64> {
    vec![0.4, 0.3, 0.2, 0.15, 0.1]
}
fn default_nu_sweep() -> Vec<f64> {
    vec![0.1, 0.05, 0.01, 0.0]
}
fn default_deltas() -> Vec<f64> {
    vec![0.02, 0.04, 0.08]
}
fn default_qvi_tol() -> f64 {
    1e-6
}
fn default_qvi_maxiter() -> usize {
    20
}
fn default_target() -> f64 {
    0.5
}
fn default_oracle_n() -> usize {
    64
}
fn default_oracle_nu() -> f64 {
    5.0
}
fn default_oracle_t() -> f64 {
    0.2
}
fn default_oracle_steps() -> usize {
    50
}
fn default_oracle_psi() -> String {
    "1".into()
}
fn default_oracle_f() -> String {
    "12".into()
}
fn default_oracle_eps() -> Vec<f64> {
    vec![0.4, 0.2, 0.1]
}

/// Solver objects built from a configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub grid: Grid,
    pub solver: SolverConfig,
    pub threshold: ThresholdProvider,
    pub forcing: ForceProvider,
    pub u0: VelocityField,
}

fn expr(field: &str, source: &str) -> Result<Expr> {
    Expr::parse(source).map_err(|e| Error::Config(format!("{field}: {e}")))
}

fn required<'a, T>(value: &'a Option<T>, field: &str, kind: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "threshold.{field} is required for kind = \"{kind}\""
        ))
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn check(&self) -> Result<()> {
        let t = &self.threshold;
        if !(t.psi_star > 0.0) || !(t.psi_upper >= t.psi_star) {
            return Err(Error::Config(format!(
                "threshold.psi_star and threshold.psi_upper must satisfy 0 < psi_star <= psi_upper, got {} and {}",
                t.psi_star, t.psi_upper
            )));
        }
        if self.solver.steps.is_some() && self.solver.t_end.is_some() {
            return Err(Error::Config(
                "solver: give either steps or t_end, not both".into(),
            ));
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain> {
        Domain::new(
            self.domain.lx,
            self.domain.ly,
            self.domain.nx,
            self.domain.ny,
        )
    }

    pub fn solver_config(&self, d: &Domain) -> Result<SolverConfig> {
        let s = &self.solver;
        let dt = s.dt.unwrap_or_else(|| SolverConfig::default_dt(d.h, 1.0));
        let t_end = match (s.steps, s.t_end) {
            (Some(n), _) => n as f64 * dt,
            (None, Some(t)) => t,
            (None, None) => {
                return Err(Error::Config(
                    "solver.steps or solver.t_end is required".into(),
                ))
            }
        };
        let mut cfg = SolverConfig::new(s.nu, dt, t_end, PenaltyParams::new(s.eps, s.q)?)?;
        if let Some(v) = s.picard_tol {
            cfg.picard_tol = v;
        }
        if let Some(v) = s.picard_max {
            cfg.picard_max = v;
        }
        if let Some(v) = s.relax {
            cfg.relax = v;
        }
        if let Some(v) = s.inner {
            cfg.inner = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Threshold provider; `beta` overrides the configured norm-functional
    /// coefficient.
    pub fn threshold(&self, dt: f64, beta: Option<f64>) -> Result<ThresholdProvider> {
        let t = &self.threshold;
        let bounds = ThresholdBounds::new(t.psi_star, t.psi_upper)?;
        let source = match t.kind {
            ThresholdKind::Constant => {
                ThresholdSource::Constant(*required(&t.value, "value", "constant")?)
            }
            ThresholdKind::Analytic => ThresholdSource::Analytic(expr(
                "threshold.expr",
                required(&t.expr, "expr", "analytic")?,
            )?),
            ThresholdKind::Norm => {
                let alpha = *required(&t.alpha, "alpha", "norm")?;
                let beta = beta.or(t.beta).unwrap_or(0.0);
                let phi = expr("threshold.phi", required(&t.phi, "phi", "norm")?)?;
                ThresholdSource::Norm(NormFunctional::new(alpha, beta, phi)?)
            }
            ThresholdKind::Kernel => ThresholdSource::Kernel(KernelFunctional {
                kernel: Kernel::Separable {
                    target: expr("threshold.target", required(&t.target, "target", "kernel")?)?,
                    source: expr("threshold.source", required(&t.source, "source", "kernel")?)?,
                },
                phi: expr("threshold.phi", required(&t.phi, "phi", "kernel")?)?,
            }),
            ThresholdKind::Parabolic => {
                let get = |v: &Option<String>, name: &str, default: &str| {
                    expr(
                        &format!("threshold.{name}"),
                        v.as_deref().unwrap_or(default),
                    )
                };
                let pc = ParabolicCoupling {
                    a11: get(&t.a11, "a11", "1")?,
                    a12: get(&t.a12, "a12", "0")?,
                    a22: get(&t.a22, "a22", "1")?,
                    source: get(&t.source, "source", "0")?,
                    zeta0: get(&t.zeta0, "zeta0", "0")?,
                    outer: expr("threshold.outer", required(&t.outer, "outer", "parabolic")?)?,
                };
                ThresholdSource::Parabolic(pc)
            }
        };
        let provider = ThresholdProvider::new(source, bounds);
        match t.mollify_n {
            Some(n) => mollify(provider, n, dt),
            None => Ok(provider),
        }
    }

    pub fn forcing(&self) -> Result<ForceProvider> {
        Ok(ForceProvider::Analytic {
            fx: expr("forcing.fx", &self.forcing.fx)?,
            fy: expr("forcing.fy", &self.forcing.fy)?,
        })
    }

    /// Discretely divergence-free initial velocity.
    pub fn initial_velocity(&self, grid: &Grid) -> Result<VelocityField> {
        let d = grid.domain;
        let stream = expr("initial.stream", &self.initial.stream)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut values = Vec::with_capacity(d.n_stream());
        for j in 0..d.ny - 1 {
            for i in 0..d.nx - 1 {
                let (x, y) = ((i + 1) as f64 * d.h, (j + 1) as f64 * d.h);
                let noise = if self.initial.noise > 0.0 {
                    self.initial.noise * rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                };
                values.push(stream.eval_xyt(x, y, 0.0) + noise);
            }
        }
        Ok(grid.curl(&values))
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.resolve_with_beta(None)
    }

    pub fn resolve_with_beta(&self, beta: Option<f64>) -> Result<Resolved> {
        let d = self.domain()?;
        let grid = Grid::new(d);
        let solver = self.solver_config(&d)?;
        Ok(Resolved {
            threshold: self.threshold(solver.dt, beta)?,
            forcing: self.forcing()?,
            u0: self.initial_velocity(&grid)?,
            solver,
            grid,
        })
    }
}
