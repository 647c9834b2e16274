use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("right-hand side incompatible with the singular operator (mean {mean:.3e})")]
    IncompatibleRHS { mean: f64 },
    #[error("hole edge does not lie on a grid line: {0}")]
    MisalignedHole(String),
    #[error("hole must be strictly inside the unit cell (hole_side = {0})")]
    HoleTouchesBoundary(f64),
    #[error("1/epsilon must be an integer (epsilon = {0})")]
    NonIntegerReciprocal(f64),
    #[error("field placement mismatch: {0}")]
    PlacementMismatch(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("time step violates the advective CFL bound: dt = {dt:.3e} > {limit:.3e}")]
    CFLViolated { dt: f64, limit: f64 },
    #[error("invariant violated: {0}")]
    InvariantViolated(String),
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),
    #[error("cutoff band too wide for epsilon = {0}")]
    BandTooWide(f64),
    #[error("delta = {delta} outside (0, {max}]")]
    DeltaOutOfRange { delta: f64, max: f64 },
    #[error("tensor is singular")]
    SingularTensor,
    #[error("rate fit is degenerate: {0}")]
    DegenerateFit(String),
    #[error("epsilon ladder too short: need at least 3 values, got {0}")]
    LadderTooShort(usize),
    #[error("parse error: {0}")]
    ParseError(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Configuration problems, as opposed to numerical failures.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::ParseError(_)
                | Error::InvalidConfig(_)
                | Error::MisalignedHole(_)
                | Error::HoleTouchesBoundary(_)
                | Error::NonIntegerReciprocal(_)
                | Error::BandTooWide(_)
                | Error::DeltaOutOfRange { .. }
                | Error::LadderTooShort(_)
                | Error::RegimeMismatch(_)
        )
    }
}
