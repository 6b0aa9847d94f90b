use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    LinearSolver {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("Picard iteration diverged at t = {t:.6} after {iterations} inner iterations")]
    PicardDiverged { t: f64, iterations: usize },

    #[error("initial velocity violates the threshold at cell ({i}, {j}): |Du| = {value:.6} > psi = {psi:.6}")]
    InitialConstraintViolated {
        i: usize,
        j: usize,
        value: f64,
        psi: f64,
    },

    #[error("threshold value {value} at cell ({i}, {j}) outside [{lower}, {upper}]")]
    BoundsViolated {
        i: usize,
        j: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("threshold functional needs a velocity trajectory")]
    MissingTrajectory,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(
        "sup-norm bound unavailable: give a Korn-Sobolev constant or enable the pilot-run estimate"
    )]
    MissingKorn,

    #[error("fixed-point iteration did not converge in {maxiter} iterations (last distance {last_distance:.3e})")]
    NotConverged {
        maxiter: usize,
        last_distance: f64,
        history: Box<crate::qvi::FixedPointHistory>,
    },

    #[error(
        "projected descent stalled after {iterations} iterations (stationarity {stationarity:.3e})"
    )]
    ProjectionStalled {
        iterations: usize,
        stationarity: f64,
    },

    #[error("expression error at column {column}: {message}")]
    Expression { column: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
