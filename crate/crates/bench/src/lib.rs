//! Shared fixtures for the criterion benchmarks.

use thickflow::{
    Domain, FlowState, ForceProvider, Grid, PenaltyParams, ScalarField, SolverConfig, Stepper,
    VelocityField,
};

/// Stepper, state at rest, threshold and forcing of the lid-driven
/// benchmark problem on an `n x n` grid.
pub struct StepFixture {
    pub stepper: Stepper,
    pub state: FlowState,
    pub psi: ScalarField,
    pub force: VelocityField,
}

pub fn step_fixture(n: usize, eps: f64) -> StepFixture {
    let d = Domain::unit_square(n).expect("valid grid");
    let cfg = SolverConfig::new(
        0.1,
        d.h / 4.0,
        d.h / 4.0,
        PenaltyParams::with_eps(eps).expect("valid eps"),
    )
    .expect("valid config");
    let f = ForceProvider::analytic("10*sin(pi*x)*exp(-8*(1-y))", "0").expect("valid forcing");
    StepFixture {
        stepper: Stepper::new(Grid::new(d), cfg).expect("valid stepper"),
        state: FlowState {
            t: 0.0,
            u: VelocityField::zeros(&d),
            pressure: ScalarField::zeros(&d),
            lambda: ScalarField::zeros(&d),
        },
        psi: ScalarField::constant(&d, 1.0),
        force: f.sample(&d, d.h / 4.0),
    }
}

/// Velocity with a gradient component, for projection benchmarks.
pub fn rough_velocity(d: &Domain) -> VelocityField {
    VelocityField::from_fn(d, |x, y| ((3.0 * x).sin() * y, (2.0 * y).cos() * x * x))
}
